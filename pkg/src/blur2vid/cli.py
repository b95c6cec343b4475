"""Command-line entry point.

Subcommands: synth, train-ae, train-bie, train-dm, infer, gradcheck, eval,
params. Every run prints its resolved configuration before acting. Exit
codes: 0 success, 1 usage error, 2 runtime failure. The MUL_THREADS env var
caps BLAS worker threads (default 1, which also makes runs bit-reproducible).
"""

from __future__ import annotations

import argparse
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _set_threads() -> None:
    n = os.environ.get("MUL_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _print_config(name: str, cfg: dict) -> None:
    print(f"[{name}] config: " + " ".join(f"{k}={v}" for k, v in cfg.items()))


def build_parser() -> _Parser:
    p = _Parser(prog="blur2vid",
                description="Motion extraction from blurred images")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate a synthetic sprite dataset")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--frames", type=int, default=5)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sprites", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    for name, help_ in (("train-ae", "stage 1: video autoencoder"),
                        ("train-bie", "stage 2: blurred-image encoder"),
                        ("train-dm", "deblurring module")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--dataset", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--iters", type=int, required=True)
        t.add_argument("--lr", type=float, default=1e-4)
        t.add_argument("--batch", type=int,
                       default=16 if name == "train-dm" else 10)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--mu", type=float, default=0.02)
        t.add_argument("--paper-scale", action="store_true",
                       help="full paper channel widths")
        t.add_argument("--augment", action="store_true")
        t.add_argument("--log", default=None)
        t.add_argument("--checkpoint-every", type=int, default=0)
        if name == "train-bie":
            t.add_argument("--stage1", required=True)
            t.add_argument("--rvd-lr", type=float, default=2e-5)
            t.add_argument("--no-tv", action="store_true")
    sub.choices["train-ae"].set_defaults(func=cmd_train_ae)
    sub.choices["train-bie"].set_defaults(func=cmd_train_bie)
    sub.choices["train-dm"].set_defaults(func=cmd_train_dm)

    i = sub.add_parser("infer", help="blurred image -> deblurred frame sequence")
    i.add_argument("--blurred", required=True)
    i.add_argument("--dm", required=True)
    i.add_argument("--bie", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference suite over all ops")
    g.add_argument("--seeds", type=int, default=5)
    g.add_argument("--eps", type=float, default=1e-3)
    g.add_argument("--only", default=None, help="substring filter on case names")
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="ambiguity-invariant error and DM PSNR")
    e.add_argument("--dataset", required=True)
    e.add_argument("--bie", required=True)
    e.add_argument("--dm", required=True)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("params", help="per-model parameter counts")
    q.add_argument("--frames", type=int, default=5)
    q.add_argument("--size", type=int, default=64)
    q.add_argument("--paper-scale", action="store_true")
    q.set_defaults(func=cmd_params)
    return p


# --- handlers (heavy imports stay inside so MUL_THREADS applies first) ----


def cmd_synth(args) -> int:
    import numpy as np
    from .datagen import form_blur, random_scene, synth_sequence, write_dataset

    _print_config("synth", {"count": args.count, "frames": args.frames,
                            "size": args.size, "seed": args.seed,
                            "sprites": args.sprites, "out": args.out})
    if args.frames % 2 == 0:
        raise ValueError(f"frame count must be odd, got {args.frames}")
    rng = np.random.default_rng([args.seed, 0x5EED])
    pairs, provenance = [], []
    for _ in range(args.count):
        spec = random_scene(rng, args.size, args.frames, args.sprites)
        seq_seed = int(rng.integers(1 << 31))
        pairs.append(form_blur(synth_sequence(spec, seq_seed)))
        provenance.append((spec, seq_seed))
    write_dataset(pairs, args.out, provenance)
    print(f"wrote {args.count} sequences ({args.frames} frames, "
          f"{args.size}x{args.size}) to {args.out}")
    return 0


def _model_config(args, frames: int, size: int):
    from .models import ModelConfig

    base = ModelConfig.paper if args.paper_scale else ModelConfig.desk
    return base(frames=frames, image_size=size)


def _load_pairs(path):
    from .datagen import read_dataset, read_manifest

    manifest = read_manifest(path)
    return manifest, read_dataset(path), manifest["frames"]


def cmd_train_ae(args) -> int:
    from .checkpoint import save_checkpoint
    from .losses import LossConfig
    from .trainer import TrainConfig, result_to_checkpoint, train_autoencoder

    manifest, pairs, frames = _load_pairs(args.dataset)
    size = pairs[0].blurred.shape[-1]
    mcfg = _model_config(args, frames, size)
    tcfg = TrainConfig(stage="autoencoder", iterations=args.iters, lr=args.lr,
                       batch_size=args.batch, seed=args.seed,
                       loss=LossConfig(mu=args.mu), augment=args.augment)
    _print_config("train-ae", {**mcfg.to_dict(), "iters": args.iters,
                               "lr": args.lr, "batch": args.batch,
                               "seed": args.seed, "mu": args.mu,
                               "augment": args.augment})
    log = args.log or args.out + ".log"
    res = train_autoencoder(pairs, mcfg, tcfg, log_path=log,
                            checkpoint_path=args.out,
                            checkpoint_every=args.checkpoint_every)
    save_checkpoint(args.out, result_to_checkpoint(res))
    print(f"final loss {res.trace[-1]['loss']:.5f} -> {args.out}")
    return 0


def cmd_train_bie(args) -> int:
    from dataclasses import replace

    from .checkpoint import load_checkpoint, save_checkpoint
    from .losses import LossConfig
    from .models import ModelConfig
    from .trainer import TrainConfig, result_to_checkpoint, train_bie

    manifest, pairs, frames = _load_pairs(args.dataset)
    size = pairs[0].blurred.shape[-1]
    stage1 = load_checkpoint(args.stage1)
    mcfg = replace(ModelConfig.from_dict(stage1.config), frames=frames,
                   image_size=size)
    tcfg = TrainConfig(stage="bie", iterations=args.iters, lr=args.lr,
                       rvd_lr=args.rvd_lr, batch_size=args.batch,
                       seed=args.seed, loss=LossConfig(mu=args.mu),
                       augment=args.augment, stage2_tv=not args.no_tv)
    _print_config("train-bie", {**mcfg.to_dict(), "iters": args.iters,
                                "lr": args.lr, "rvd_lr": args.rvd_lr,
                                "batch": args.batch, "seed": args.seed,
                                "tv": not args.no_tv})
    log = args.log or args.out + ".log"
    res = train_bie(pairs, mcfg, tcfg, stage1, log_path=log,
                    checkpoint_path=args.out,
                    checkpoint_every=args.checkpoint_every)
    save_checkpoint(args.out, result_to_checkpoint(res))
    print(f"final loss {res.trace[-1]['loss']:.5f} -> {args.out}")
    return 0


def cmd_train_dm(args) -> int:
    from .checkpoint import save_checkpoint
    from .losses import LossConfig
    from .trainer import TrainConfig, result_to_checkpoint, train_dm

    manifest, pairs, frames = _load_pairs(args.dataset)
    size = pairs[0].blurred.shape[-1]
    mcfg = _model_config(args, frames, size)
    tcfg = TrainConfig(stage="dm", iterations=args.iters, lr=args.lr,
                       batch_size=args.batch, seed=args.seed,
                       loss=LossConfig(mu=args.mu), augment=args.augment)
    _print_config("train-dm", {**mcfg.to_dict(), "iters": args.iters,
                               "lr": args.lr, "batch": args.batch,
                               "seed": args.seed})
    log = args.log or args.out + ".log"
    res = train_dm(pairs, mcfg, tcfg, log_path=log, checkpoint_path=args.out,
                   checkpoint_every=args.checkpoint_every)
    save_checkpoint(args.out, result_to_checkpoint(res))
    print(f"final loss {res.trace[-1]['loss']:.5f} -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    from pathlib import Path

    from .autodiff import Tensor
    from .checkpoint import CheckpointError, load_checkpoint
    from .datagen import _from_png, _to_png
    from .trainer import models_from_checkpoint

    dm_ck = load_checkpoint(args.dm)
    bie_ck = load_checkpoint(args.bie)
    if dm_ck.stage != "dm":
        raise CheckpointError(f"--dm expects a dm checkpoint, got {dm_ck.stage!r}")
    if bie_ck.stage != "bie":
        raise CheckpointError(
            f"--bie expects a stage-2 checkpoint, got {bie_ck.stage!r}")
    _, dm_models = models_from_checkpoint(dm_ck)
    mcfg, bie_models = models_from_checkpoint(bie_ck)
    _print_config("infer", {"blurred": args.blurred, "frames": mcfg.frames,
                            "out": args.out})
    blurred = _from_png(Path(args.blurred))
    h, w = blurred.shape[-2:]
    if h % 16 or w % 16:
        raise ValueError(f"input size {(h, w)} must be divisible by 16")
    deblurred = dm_models["dm"].infer(blurred)
    bie, rvd = bie_models["bie"], bie_models["rvd"]
    state = bie(Tensor(blurred), Tensor(deblurred), training=False)
    preds = rvd.rollout(state, Tensor(deblurred), mcfg.frames)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _to_png(out_dir / "deblurred.png", deblurred)
    import numpy as np
    for n, per_scale in enumerate(preds.frames):
        frame = np.clip(per_scale[3].data, 0.0, 1.0)
        _to_png(out_dir / f"frame_{n:02d}.png", frame)
    print(f"wrote deblurred.png and {mcfg.frames} frames to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_all

    _print_config("gradcheck", {"seeds": args.seeds, "eps": args.eps,
                                "only": args.only})
    results = run_all(args.seeds, args.eps, args.only)
    if not results:
        raise ValueError(f"no check case matches {args.only!r}")
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:<{width}}  max_err {r.max_err:.3e}  "
              f"bound {r.bound:.0e}  {r.seconds:6.2f}s  {status}")
    print(f"{len(results) - failed}/{len(results)} cases passed")
    return 0 if failed == 0 else 2


def cmd_eval(args) -> int:
    import numpy as np

    from .autodiff import Tensor
    from .checkpoint import CheckpointError, load_checkpoint
    from .datagen import read_dataset
    from .losses import order_invariant_loss, psnr
    from .trainer import models_from_checkpoint

    bie_ck = load_checkpoint(args.bie)
    dm_ck = load_checkpoint(args.dm)
    if bie_ck.stage != "bie" or dm_ck.stage != "dm":
        raise CheckpointError("eval needs --bie (stage-2) and --dm checkpoints")
    mcfg, bie_models = models_from_checkpoint(bie_ck)
    _, dm_models = models_from_checkpoint(dm_ck)
    pairs = read_dataset(args.dataset)
    _print_config("eval", {"dataset": args.dataset, "pairs": len(pairs),
                           "frames": mcfg.frames})
    bie, rvd, dm = bie_models["bie"], bie_models["rvd"], dm_models["dm"]
    errs, psnrs = [], []
    for pair in pairs:
        deblurred = dm.infer(pair.blurred)
        psnrs.append(psnr(deblurred, pair.source.center))
        state = bie(Tensor(pair.blurred), Tensor(deblurred), training=False)
        preds = rvd.rollout(state, Tensor(deblurred), len(pair.source.frames))
        errs.append(float(order_invariant_loss(preds, pair.source, 3).data))
    print(f"mean ordering-invariant error {np.mean(errs):.5f}")
    print(f"mean deblurring PSNR {np.mean(psnrs):.2f} dB")
    return 0


def cmd_params(args) -> int:
    from .models import ModelConfig, build_models, param_count

    base = ModelConfig.paper if args.paper_scale else ModelConfig.desk
    mcfg = base(frames=args.frames, image_size=args.size)
    _print_config("params", mcfg.to_dict())
    nets = build_models(mcfg, 0)
    total = 0
    for key, model in nets.items():
        n = param_count(model.named_params(key))
        total += n
        print(f"{key:4s} {n:10d} parameters")
    print(f"all  {total:10d} parameters")
    return 0


def main(argv=None) -> int:
    _set_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures exit 2 with one line
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
