import math

import numpy as np
import pytest

from blur2vid.autodiff import Param
from blur2vid.checkpoint import (Checkpoint, CheckpointError, load_checkpoint,
                                 restore_params, save_checkpoint)
from blur2vid.datagen import SceneSpec, SpriteSpec, form_blur, synth_sequence
from blur2vid.losses import LossConfig
from blur2vid.models import ModelConfig
from blur2vid.trainer import (AdamState, TrainConfig, adam_step,
                              clip_global_norm, models_from_checkpoint,
                              result_to_checkpoint, train_autoencoder,
                              train_bie, train_dm)


def tiny_scene(velocity=(1.5, 0.5)):
    return SceneSpec(size=32, frames=3, background_seed=2, sprites=[
        SpriteSpec("disk", 5, (12.0, 16.0), velocity, radius=5.0)])


def tiny_pair(seed=3, velocity=(1.5, 0.5)):
    return form_blur(synth_sequence(tiny_scene(velocity), seed=seed))


def tiny_mcfg():
    return ModelConfig(frames=3, image_size=32, base_channels=2,
                       dm_channels=8, dm_growth=4, dm_rdb_layers=2,
                       dm_rdbs_per_level=1)


def scalar_adam_reference(grad_fn, w0, lr, steps):
    """Standalone float Adam, straight from the update equations."""
    b1, b2, eps = 0.9, 0.999, 1e-8
    w, m, v = float(w0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w -= lr * mh / (math.sqrt(vh) + eps)
    return w


def test_adam_zero_grad_keeps_params_decays_moments():
    p = Param(np.array([1.0, -2.0], np.float32))
    params = {"w": p}
    state = AdamState.for_params(params)
    state.v["w"][:] = 1.0  # m stays zero, so the update is exactly zero
    before = p.value.copy()
    adam_step(params, {"w": np.zeros(2, np.float32)}, state, 1e-3)
    np.testing.assert_array_equal(p.value, before)
    np.testing.assert_array_equal(state.m["w"], 0.0)
    assert np.all(state.v["w"] < 1.0)


def test_adam_first_step_magnitude():
    p = Param(np.array([0.0], np.float32))
    params = {"w": p}
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.array([5.0], np.float32)}, state, 1e-2)
    np.testing.assert_allclose(-p.value[0], 1e-2, rtol=1e-4)


def test_adam_quadratic_convergence():
    p = Param(np.array([0.0], np.float64))
    params = {"w": p}
    state = AdamState.for_params(params)
    for _ in range(100):
        g = 2.0 * (p.value - 3.0)
        adam_step(params, {"w": g}, state, 0.1)
    assert abs(p.value[0] - 3.0) < 0.1


def test_adam_matches_scalar_reference_1000_steps():
    p = Param(np.array([0.0], np.float64))
    params = {"w": p}
    state = AdamState.for_params(params)
    for _ in range(1000):
        adam_step(params, {"w": 2.0 * (p.value - 3.0)}, state, 0.05)
    want = scalar_adam_reference(lambda w: 2.0 * (w - 3.0), 0.0, 0.05, 1000)
    assert abs(p.value[0] - want) < 1e-7


def test_adam_nonfinite_grad_names_param():
    params = {"layer.weight": Param(np.zeros(2, np.float32))}
    state = AdamState.for_params(params)
    bad = {"layer.weight": np.array([1.0, np.nan], np.float32)}
    with pytest.raises(ValueError, match="layer.weight"):
        adam_step(params, bad, state, 1e-3)


def test_clip_global_norm():
    grads = {"a": np.full(4, 3.0, np.float32), "b": np.full(9, 4.0, np.float32)}
    norm = clip_global_norm(grads, 1.0)
    assert norm > 1.0
    total = sum(float(np.sum(g.astype(np.float64) ** 2))
                for g in grads.values())
    np.testing.assert_allclose(math.sqrt(total), 1.0, rtol=1e-5)


def test_train_config_validation():
    with pytest.raises(ValueError, match="stage"):
        TrainConfig(stage="warmup", iterations=1)
    with pytest.raises(ValueError, match="positive"):
        TrainConfig(stage="dm", iterations=0)
    with pytest.raises(ValueError, match="below"):
        TrainConfig(stage="bie", iterations=1, lr=1e-4, rvd_lr=1e-4)


def test_validate_dataset_before_step():
    with pytest.raises(ValueError, match="empty"):
        train_autoencoder([], tiny_mcfg(),
                          TrainConfig(stage="autoencoder", iterations=1))
    pair = tiny_pair()
    bad_cfg = ModelConfig(frames=5, image_size=32, base_channels=2)
    with pytest.raises(ValueError, match="frames"):
        train_autoencoder([pair], bad_cfg,
                          TrainConfig(stage="autoencoder", iterations=1))


def _short_ae(seed=0, iters=4):
    tcfg = TrainConfig(stage="autoencoder", iterations=iters, batch_size=1,
                       seed=seed, loss=LossConfig())
    return train_autoencoder([tiny_pair()], tiny_mcfg(), tcfg)


def test_training_deterministic_and_checkpoint_roundtrip(tmp_path):
    ck_a = result_to_checkpoint(_short_ae())
    ck_b = result_to_checkpoint(_short_ae())
    assert ck_a.entries.keys() == ck_b.entries.keys()
    for name in ck_a.entries:
        np.testing.assert_array_equal(ck_a.entries[name], ck_b.entries[name])

    path = tmp_path / "s1.ck"
    save_checkpoint(path, ck_a)
    loaded = load_checkpoint(path)
    assert loaded.stage == "autoencoder"
    assert loaded.iteration == ck_a.iteration
    for name in ck_a.entries:
        np.testing.assert_array_equal(loaded.entries[name],
                                      ck_a.entries[name])
    path2 = tmp_path / "s1b.ck"
    save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_loss_traces_identical_across_reruns():
    ta = _short_ae(seed=9).trace
    tb = _short_ae(seed=9).trace
    assert [r["loss"] for r in ta] == [r["loss"] for r in tb]


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "t.ck"
    save_checkpoint(path, result_to_checkpoint(_short_ae(iters=2)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "t.ck"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)


def test_checkpoint_unknown_version(tmp_path):
    path = tmp_path / "t.ck"
    save_checkpoint(path, result_to_checkpoint(_short_ae(iters=2)))
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_restore_shape_mismatch_names_parameter():
    entries = {"w": np.zeros((2, 3), np.float32)}
    with pytest.raises(CheckpointError, match="shape mismatch for parameter w"):
        restore_params({"w": Param(np.zeros((3, 2), np.float32))}, entries)
    with pytest.raises(CheckpointError, match="missing parameter q"):
        restore_params({"q": Param(np.zeros(2, np.float32))}, entries)


def test_stage2_requires_stage1_checkpoint():
    dm_ck = Checkpoint("dm", tiny_mcfg().to_dict(), 0, {})
    tcfg = TrainConfig(stage="bie", iterations=1, batch_size=1)
    with pytest.raises(CheckpointError, match="stage-1"):
        train_bie([tiny_pair()], tiny_mcfg(), tcfg, dm_ck)


def test_stage2_zero_rvd_rate_freezes_rvd(tmp_path):
    stage1 = result_to_checkpoint(_short_ae(iters=3))
    tcfg = TrainConfig(stage="bie", iterations=3, batch_size=1, seed=1,
                       rvd_lr=0.0, loss=LossConfig())
    res = train_bie([tiny_pair()], tiny_mcfg(), tcfg, stage1)
    for name, p in res.models["rvd"].named_params("rvd").items():
        np.testing.assert_array_equal(p.value.tobytes(),
                                      stage1.entries[name].tobytes())


def test_stage2_trains_bie_and_finetunes_rvd():
    stage1 = result_to_checkpoint(_short_ae(iters=3))
    tcfg = TrainConfig(stage="bie", iterations=3, batch_size=1, seed=1,
                       loss=LossConfig())
    res = train_bie([tiny_pair()], tiny_mcfg(), tcfg, stage1)
    moved = [name for name, p in res.models["rvd"].named_params("rvd").items()
             if not np.array_equal(p.value, stage1.entries[name])]
    assert moved  # reduced rate still updates RVD
    assert all(math.isfinite(r["loss"]) for r in res.trace)


def test_stage1_checkpoint_into_wrong_width_config():
    stage1 = result_to_checkpoint(_short_ae(iters=2))
    wide = ModelConfig(frames=3, image_size=32, base_channels=4)
    tcfg = TrainConfig(stage="bie", iterations=1, batch_size=1)
    with pytest.raises(CheckpointError, match="shape mismatch for parameter"):
        train_bie([tiny_pair()], wide, tcfg, stage1)


def test_train_dm_and_restore(tmp_path):
    tcfg = TrainConfig(stage="dm", iterations=3, batch_size=1, seed=2,
                       loss=LossConfig())
    res = train_dm([tiny_pair()], tiny_mcfg(), tcfg)
    assert all(math.isfinite(r["loss"]) for r in res.trace)
    path = tmp_path / "dm.ck"
    save_checkpoint(path, result_to_checkpoint(res))
    mcfg, nets = models_from_checkpoint(load_checkpoint(path))
    for name, p in nets["dm"].named_params("dm").items():
        np.testing.assert_array_equal(p.value,
                                      res.models["dm"].named_params("dm")[name].value)


def test_stage2_checkpoint_restores_bn_buffers(tmp_path):
    stage1 = result_to_checkpoint(_short_ae(iters=2))
    tcfg = TrainConfig(stage="bie", iterations=2, batch_size=1, seed=1,
                       loss=LossConfig())
    res = train_bie([tiny_pair()], tiny_mcfg(), tcfg, stage1)
    path = tmp_path / "s2.ck"
    save_checkpoint(path, result_to_checkpoint(res))
    mcfg, nets = models_from_checkpoint(load_checkpoint(path))
    for bn_new, bn_old in zip(nets["bie"].norms, res.models["bie"].norms):
        assert bn_new.state.initialized
        np.testing.assert_array_equal(bn_new.state.mean, bn_old.state.mean)
        np.testing.assert_array_equal(bn_new.state.var, bn_old.state.var)


def test_nonfinite_loss_aborts_with_diagnostics():
    pair = tiny_pair()
    pair.blurred[0, 0, 0] = np.nan
    pair.source.frames[0][0, 0, 0] = np.nan
    tcfg = TrainConfig(stage="dm", iterations=5, batch_size=1, seed=0,
                       loss=LossConfig())
    with pytest.raises(RuntimeError, match="non-finite training loss"):
        train_dm([pair], tiny_mcfg(), tcfg)


def test_log_file_format(tmp_path):
    log = tmp_path / "train.log"
    tcfg = TrainConfig(stage="autoencoder", iterations=3, batch_size=1,
                       seed=0, loss=LossConfig(), log_every=1)
    train_autoencoder([tiny_pair()], tiny_mcfg(), tcfg, log_path=str(log))
    lines = log.read_text().strip().splitlines()
    assert lines[0].startswith("#")
    fields = lines[1].split()
    assert len(fields) == 5
    int(fields[0])
    [float(v) for v in fields[1:]]
