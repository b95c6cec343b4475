"""Adam optimization and the three training stages.

Stage 1 fits RVE+RVD on video reconstruction (Eq.-5-style data terms);
stage 2 trains the BIE from scratch while fine-tuning all RVD parameters at
a reduced rate under the ordering-invariant objective; the deblurring net
trains separately on finest-scale L1. One RNG seeded from the config drives
batch sampling and augmentation, so single-threaded runs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import datagen
from .autodiff import Param, Tape, Tensor
from .checkpoint import Checkpoint, CheckpointError, restore_params
from .losses import LossConfig, total_loss
from .models import BlurPair, ModelConfig, build_models
from . import autodiff as ad

STAGES = ("autoencoder", "bie", "dm")


@dataclass
class TrainConfig:
    stage: str
    iterations: int
    lr: float = 1e-4
    rvd_lr: float = 2e-5
    batch_size: int = 10
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    # norm 1.0 keeps late-stage Adam limit cycles small enough that the
    # smoothed loss stays monotone; larger values let the loss spike
    clip_norm: float = 1.0
    augment: bool = False
    stage2_tv: bool = True
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.iterations < 1:
            raise ValueError("iteration budget must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.rvd_lr < 0:
            raise ValueError("RVD learning rate must be >= 0")
        if self.stage == "bie" and self.rvd_lr >= self.lr:
            raise ValueError("stage-2 RVD rate must stay below the BIE rate")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Param]) -> "AdamState":
        return cls({n: np.zeros_like(p.value) for n, p in params.items()},
                   {n: np.zeros_like(p.value) for n, p in params.items()})


def adam_step(params: dict[str, Param], grads: dict[str, np.ndarray],
              state: AdamState, lr) -> None:
    """One bias-corrected Adam update; lr is a float or a name->rate map."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        elif not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name}")
        rate = lr[name] if isinstance(lr, dict) else lr
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if rate != 0.0:  # rate 0 freezes the parameter bit-exactly
            p.value = p.value - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * np.float32(s)
    return norm


@dataclass
class TrainResult:
    models: dict
    params: dict[str, Param]
    adam: AdamState
    trace: list[dict]
    mcfg: ModelConfig
    tcfg: TrainConfig
    rng_state: dict


def _validate_dataset(data: list[BlurPair], mcfg: ModelConfig,
                      need_16: bool) -> None:
    if not data:
        raise ValueError("dataset is empty")
    for i, pair in enumerate(data):
        if len(pair.source.frames) != mcfg.frames:
            raise ValueError(
                f"sequence {i} has {len(pair.source.frames)} frames, config "
                f"expects {mcfg.frames}")
        h, w = pair.blurred.shape[-2:]
        div = 16 if need_16 else 8
        if h % div or w % div:
            raise ValueError(
                f"sequence {i} size {(h, w)} not divisible by {div}")
        if pair.blurred.shape != pair.source.frames[0].shape:
            raise ValueError(f"sequence {i}: blur/frame shape mismatch")


def _collect_grads(tape: Tape, grad_map: dict, params: dict[str, Param],
                   acc: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        nid = tape.node_id_of(p)
        if nid is None or nid not in grad_map:
            continue
        g = grad_map[nid].data
        if name in acc:
            acc[name] = acc[name] + g
        else:
            acc[name] = g


def _train_loop(data, tcfg, params, forward, lr, log_path=None,
                snapshot=None, snapshot_every=0):
    adam = AdamState.for_params(params)
    rng = np.random.default_rng([tcfg.seed, 0x7E41])
    trace = []
    log_f = open(log_path, "a") if log_path else None
    if log_f:
        log_f.write("# iter loss lr data tv\n")
    try:
        for it in range(tcfg.iterations):
            idx = rng.integers(0, len(data), size=tcfg.batch_size)
            acc: dict[str, np.ndarray] = {}
            loss_sum = 0.0
            comp_sum = {"data": 0.0, "tv": 0.0}
            for k in idx:
                pair = data[int(k)]
                if tcfg.augment:
                    pair = datagen.augment(pair, int(rng.integers(1 << 31)))
                with Tape() as tape:
                    loss, comps = forward(pair)
                grad_map = tape.backward(loss)
                _collect_grads(tape, grad_map, params, acc)
                loss_sum += float(loss.data)
                for key in comp_sum:
                    comp_sum[key] += comps.get(key, 0.0)
            inv_b = 1.0 / tcfg.batch_size
            for name in acc:
                acc[name] = acc[name] * np.float32(inv_b)
            if not math.isfinite(loss_sum):
                raise RuntimeError(
                    f"non-finite training loss at iteration {it}: "
                    f"{loss_sum} (components {comp_sum})")
            clip_global_norm(acc, tcfg.clip_norm)
            adam_step(params, acc, adam, lr)
            base_lr = lr if isinstance(lr, float) else tcfg.lr
            row = {"iter": it, "loss": loss_sum * inv_b, "lr": base_lr,
                   "data": comp_sum["data"] * inv_b,
                   "tv": comp_sum["tv"] * inv_b}
            trace.append(row)
            if log_f and (it % tcfg.log_every == 0 or it == tcfg.iterations - 1):
                log_f.write(f"{row['iter']} {row['loss']:.6g} {row['lr']:.3g} "
                            f"{row['data']:.6g} {row['tv']:.6g}\n")
            if snapshot and snapshot_every and (it + 1) % snapshot_every == 0:
                snapshot(it + 1, adam, rng)
    finally:
        if log_f:
            log_f.close()
    return adam, trace, rng


def _make_snapshot(models, params, mcfg, tcfg, path):
    if path is None:
        return None
    from .checkpoint import save_checkpoint

    def snapshot(it, adam, rng):
        res = TrainResult(models, params, adam, [], mcfg, tcfg,
                          rng.bit_generator.state)
        save_checkpoint(path, result_to_checkpoint(res, iteration=it))

    return snapshot


def train_autoencoder(data: list[BlurPair], mcfg: ModelConfig,
                      tcfg: TrainConfig, log_path=None, checkpoint_path=None,
                      checkpoint_every=0) -> TrainResult:
    """Stage 1: joint RVE+RVD video reconstruction."""
    _validate_dataset(data, mcfg, need_16=False)
    loss_cfg = replace(tcfg.loss, mode="reconstruction")
    nets = build_models(mcfg, tcfg.seed)
    rve, rvd = nets["rve"], nets["rvd"]
    models = {"rve": rve, "rvd": rvd}
    params = {**rve.named_params("rve"), **rvd.named_params("rvd")}

    def forward(pair: BlurPair):
        video = pair.source
        enc_state = rve(video)
        init = rvd.init_from_hidden(enc_state.h)
        preds = rvd.rollout(init, Tensor(video.center), len(video))
        return total_loss(preds, video, loss_cfg)

    adam, trace, rng = _train_loop(
        data, tcfg, params, forward, tcfg.lr, log_path,
        _make_snapshot(models, params, mcfg, tcfg, checkpoint_path),
        checkpoint_every)
    return TrainResult(models, params, adam, trace, mcfg, tcfg,
                       rng.bit_generator.state)


def train_bie(data: list[BlurPair], mcfg: ModelConfig, tcfg: TrainConfig,
              stage1: Checkpoint, log_path=None, checkpoint_path=None,
              checkpoint_every=0) -> TrainResult:
    """Stage 2: BIE from scratch, RVD fine-tuned at the reduced rate."""
    _validate_dataset(data, mcfg, need_16=False)
    if stage1.stage != "autoencoder":
        raise CheckpointError(
            f"stage-2 training needs a stage-1 checkpoint, got {stage1.stage!r}")
    mu = tcfg.loss.mu if tcfg.stage2_tv else 0.0
    loss_cfg = replace(tcfg.loss, mode="order_invariant", mu=mu)
    nets = build_models(mcfg, tcfg.seed)
    bie, rvd = nets["bie"], nets["rvd"]
    rvd_params = rvd.named_params("rvd")
    restore_params(rvd_params, stage1.entries)
    models = {"bie": bie, "rvd": rvd}
    params = {**bie.named_params("bie"), **rvd_params}
    lr = {name: (tcfg.rvd_lr if name.startswith("rvd.") else tcfg.lr)
          for name in params}

    def forward(pair: BlurPair):
        video = pair.source
        state = bie(Tensor(pair.blurred), Tensor(video.center), training=True)
        preds = rvd.rollout(state, Tensor(video.center), len(video))
        return total_loss(preds, video, loss_cfg)

    adam, trace, rng = _train_loop(
        data, tcfg, params, forward, lr, log_path,
        _make_snapshot(models, params, mcfg, tcfg, checkpoint_path),
        checkpoint_every)
    return TrainResult(models, params, adam, trace, mcfg, tcfg,
                       rng.bit_generator.state)


def train_dm(data: list[BlurPair], mcfg: ModelConfig, tcfg: TrainConfig,
             log_path=None, checkpoint_path=None,
             checkpoint_every=0) -> TrainResult:
    """Deblurring module: finest-scale L1 to the central sharp frame."""
    _validate_dataset(data, mcfg, need_16=True)
    nets = build_models(mcfg, tcfg.seed)
    dm = nets["dm"]
    params = dm.named_params("dm")

    def forward(pair: BlurPair):
        out = dm(Tensor(pair.blurred))
        loss = ad.reduce_mean(ad.absolute(
            ad.subtract(out, Tensor(pair.source.center))))
        return loss, {"data": float(loss.data), "tv": 0.0}

    adam, trace, rng = _train_loop(
        data, tcfg, params, forward, tcfg.lr, log_path,
        _make_snapshot({"dm": dm}, params, mcfg, tcfg, checkpoint_path),
        checkpoint_every)
    return TrainResult({"dm": dm}, params, adam, trace, mcfg, tcfg,
                       rng.bit_generator.state)


# ---------------------------------------------------------------------------
# checkpoint assembly / restoration


def result_to_checkpoint(res: TrainResult, iteration=None) -> Checkpoint:
    entries: dict[str, np.ndarray] = {}
    for key, model in res.models.items():
        for name, p in model.named_params(key).items():
            entries[name] = p.value
    meta: dict = {"seed": res.tcfg.seed, "rng": res.rng_state,
                  "adam_t": res.adam.t}
    if "bie" in res.models:
        for name, arr in res.models["bie"].named_buffers("bie").items():
            entries[name] = arr
        meta["bn_initialized"] = all(
            bn.state.initialized for bn in res.models["bie"].norms)
    for name in res.params:
        entries[f"opt.m.{name}"] = res.adam.m[name]
        entries[f"opt.v.{name}"] = res.adam.v[name]
    return Checkpoint(res.tcfg.stage, res.mcfg.to_dict(),
                      res.tcfg.iterations if iteration is None else iteration,
                      entries, meta)


def models_from_checkpoint(ck: Checkpoint) -> tuple[ModelConfig, dict]:
    """Rebuild and restore the models a checkpoint carries."""
    mcfg = ModelConfig.from_dict(ck.config)
    nets = build_models(mcfg, int(ck.meta.get("seed", 0)))
    wanted = {"autoencoder": ("rve", "rvd"), "bie": ("bie", "rvd"),
              "dm": ("dm",)}.get(ck.stage)
    if wanted is None:
        raise CheckpointError(f"unknown checkpoint stage {ck.stage!r}")
    out = {}
    for key in wanted:
        model = nets[key]
        restore_params(model.named_params(key), ck.entries)
        out[key] = model
    if "bie" in out:
        out["bie"].load_buffers(ck.entries, "bie",
                                initialized=bool(ck.meta.get("bn_initialized")))
    return mcfg, out
