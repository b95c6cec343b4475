import numpy as np
import pytest

import blur2vid.nn as nn
from blur2vid.autodiff import Tensor
from blur2vid.models import (BIE, DM, ModelConfig, RVD, RVE, VideoSequence,
                             build_models, param_count)


def video_of(rng, n=5, size=64):
    return VideoSequence([rng.uniform(0, 1, (3, size, size)).astype(np.float32)
                          for _ in range(n)])


def test_config_validation():
    with pytest.raises(ValueError, match="odd"):
        ModelConfig(frames=4)
    with pytest.raises(ValueError, match="divisible by 16"):
        ModelConfig(image_size=60)
    with pytest.raises(ValueError, match="positive"):
        ModelConfig(base_channels=0)


def test_rve_state_shape_desk(rng):
    mcfg = ModelConfig.desk()
    rve = RVE(mcfg, rng)
    state = rve(video_of(rng))
    assert state.h.shape == (32, 8, 8)
    assert state.c.shape == (32, 8, 8)


def test_rve_state_shape_paper_widths(rng):
    mcfg = ModelConfig.paper(image_size=64)
    rve = RVE(mcfg, rng)
    state = rve(video_of(rng, n=3))
    assert state.h.shape == (128, 8, 8)


def test_rve_zero_weights_zero_state(rng):
    mcfg = ModelConfig.desk()
    rve = RVE(mcfg, rng)
    for p in rve.named_params().values():
        p.value = np.zeros_like(p.value)
    state = rve(video_of(rng, n=3, size=16))
    np.testing.assert_array_equal(state.h.data, 0.0)
    np.testing.assert_array_equal(state.c.data, 0.0)


def test_rve_size_divisibility(rng):
    mcfg = ModelConfig.desk()
    rve = RVE(mcfg, rng)
    bad = VideoSequence([np.zeros((3, 20, 20), np.float32)])
    with pytest.raises(ValueError, match="divisible by 8"):
        rve(bad)


def test_rve_constant_input_reaches_cell_fixed_point(rng):
    # feeding the same frame repeatedly converges to the ConvLSTM fixed
    # point found by iterating the step directly
    mcfg = ModelConfig(frames=3, image_size=16, base_channels=2)
    rve = RVE(mcfg, rng)
    frame = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
    feats = rve.enc(Tensor(frame))[-1]
    state = rve.cell.zero_state(2, 2)
    steps = 0
    for _ in range(800):
        new = rve.cell(feats, state)
        steps += 1
        done = np.abs(new.h.data - state.h.data).max() < 1e-7
        state = new
        if done:
            break
    fixed = state.h.data
    long_video = VideoSequence([frame.copy() for _ in range(steps + 1)])
    got = rve(long_video).h.data
    np.testing.assert_allclose(got, fixed, atol=1e-5)


def test_rollout_pyramid_shapes(rng):
    mcfg = ModelConfig.desk()
    rvd = RVD(mcfg, rng)
    center = Tensor(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
    init = rvd.init_from_hidden(
        Tensor(rng.standard_normal((32, 8, 8)).astype(np.float32)))
    preds = rvd.rollout(init, center, 5)
    assert len(preds.flows) == 5
    shapes = [f.values.shape for f in preds.flows[0].levels]
    assert shapes == [(2, 8, 8), (2, 16, 16), (2, 32, 32), (2, 64, 64)]


def test_rollout_shape_contract_across_sizes(rng):
    mcfg = ModelConfig(frames=3, image_size=16, base_channels=2)
    rvd = RVD(mcfg, rng)
    for size in (16, 32, 48):
        center = Tensor(rng.uniform(0, 1, (3, size, size)).astype(np.float32))
        init = rvd.init_from_hidden(
            Tensor(np.zeros((16, size // 8, size // 8), np.float32)))
        preds = rvd.rollout(init, center, 3)
        for j, frac in enumerate((8, 4, 2, 1)):
            assert preds.flows[0].levels[j].values.shape == \
                (2, size // frac, size // frac)


def test_rollout_init_spatial_mismatch(rng):
    mcfg = ModelConfig(frames=3, image_size=16, base_channels=2)
    rvd = RVD(mcfg, rng)
    center = Tensor(np.zeros((3, 16, 16), np.float32))
    init = rvd.init_from_hidden(Tensor(np.zeros((16, 3, 3), np.float32)))
    with pytest.raises(ValueError, match="does not match"):
        rvd.rollout(init, center, 3)


def test_zero_flow_decoder_identity(rng):
    # flow heads are zero-initialized, so a fresh decoder reproduces the
    # center frame exactly at every step and scale
    mcfg = ModelConfig.desk()
    rvd = RVD(mcfg, rng)
    center = Tensor(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
    init = rvd.init_from_hidden(
        Tensor(rng.standard_normal((32, 8, 8)).astype(np.float32)))
    preds = rvd.rollout(init, center, 5)
    centers = rvd.center_pyramid(center)
    for n in range(5):
        for j in range(4):
            np.testing.assert_array_equal(preds.frames[n][j].data,
                                          centers[j].data)
            np.testing.assert_array_equal(preds.flows[n].levels[j].values.data,
                                          0.0)


def test_rollout_channel_permutation_equivariance(rng):
    # flows depend on the state only, so permuting the center frame's color
    # channels permutes every predicted frame identically
    mcfg = ModelConfig(frames=3, image_size=16, base_channels=2)
    rvd = RVD(mcfg, rng)
    for head in (rvd.flow0, rvd.flow1, rvd.flow2, rvd.flow3):
        head.weight.value = (0.05 * rng.standard_normal(
            head.weight.value.shape)).astype(np.float32)
    center = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
    init_h = rng.standard_normal((16, 2, 2)).astype(np.float32)
    perm = [2, 0, 1]
    a = rvd.rollout(rvd.init_from_hidden(Tensor(init_h)), Tensor(center), 3)
    b = rvd.rollout(rvd.init_from_hidden(Tensor(init_h)),
                    Tensor(center[perm]), 3)
    for n in range(3):
        np.testing.assert_array_equal(a.frames[n][3].data[perm],
                                      b.frames[n][3].data)


def test_bie_output_shapes(rng):
    mcfg = ModelConfig.desk()
    bie = BIE(mcfg, rng)
    x = Tensor(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
    y = Tensor(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
    state = bie(x, y, training=True)
    assert state.h.shape == (32, 8, 8)
    np.testing.assert_array_equal(state.c.data, 0.0)
    assert len(bie.convs) == 7 and len(bie.norms) == 6


def test_bie_paper_width_state_matches_decoder_init(rng):
    mcfg = ModelConfig.paper(image_size=64)
    bie = BIE(mcfg, rng)
    x = Tensor(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
    state = bie(x, x, training=True)
    assert state.h.shape == (128, 8, 8)


def test_bie_dual_head_predicts_cell(rng):
    mcfg = ModelConfig(bie_dual_head=True)
    bie = BIE(mcfg, rng)
    x = Tensor(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
    state = bie(x, x, training=True)
    assert state.h.shape == (32, 8, 8)
    assert state.c.shape == (32, 8, 8)
    assert np.any(state.c.data != 0.0)


def test_bie_zero_weights_zero_state(rng):
    mcfg = ModelConfig(frames=3, image_size=16, base_channels=2)
    bie = BIE(mcfg, rng)
    for name, p in bie.named_params().items():
        if "gamma" not in name:
            p.value = np.zeros_like(p.value)
    x = Tensor(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32))
    state = bie(x, x, training=True)
    np.testing.assert_array_equal(state.h.data, 0.0)


def test_bie_shape_mismatch(rng):
    bie = BIE(ModelConfig.desk(), rng)
    a = Tensor(np.zeros((3, 64, 64), np.float32))
    b = Tensor(np.zeros((3, 32, 32), np.float32))
    with pytest.raises(ValueError, match="differ"):
        bie(a, b)


def test_dm_output_shape_and_clamp(rng):
    mcfg = ModelConfig(frames=3, image_size=32, base_channels=2,
                       dm_channels=8, dm_growth=4, dm_rdb_layers=2)
    dm = DM(mcfg, rng)
    x = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    out = dm(Tensor(x))
    assert out.shape == (3, 32, 32)
    inf = dm.infer(x)
    assert inf.min() >= 0.0 and inf.max() <= 1.0


def test_dm_zero_tail_starts_as_identity(rng):
    mcfg = ModelConfig(frames=3, image_size=32, base_channels=2,
                       dm_channels=8, dm_growth=4, dm_rdb_layers=2)
    dm = DM(mcfg, rng)
    x = rng.uniform(0.1, 0.9, (3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(dm.infer(x), x)


def test_dm_size_divisibility(rng):
    dm = DM(ModelConfig.desk(), rng)
    with pytest.raises(ValueError, match="divisible by 16"):
        dm(Tensor(np.zeros((3, 24, 24), np.float32)))


def test_param_count_deterministic():
    a = build_models(ModelConfig.desk(), seed=5)
    b = build_models(ModelConfig.desk(), seed=5)
    for key in a:
        na = param_count(a[key].named_params(key))
        nb = param_count(b[key].named_params(key))
        assert na == nb > 0
        for (n1, p1), (n2, p2) in zip(a[key].named_params(key).items(),
                                      b[key].named_params(key).items()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.value, p2.value)
