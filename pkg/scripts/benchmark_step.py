#!/usr/bin/env python3
"""Per-iteration wall-clock cost of each training stage at desk scale."""

import argparse
import time

import numpy as np

from blur2vid.datagen import form_blur, random_scene, synth_sequence
from blur2vid.losses import LossConfig
from blur2vid.models import ModelConfig
from blur2vid.trainer import (TrainConfig, result_to_checkpoint,
                              train_autoencoder, train_bie, train_dm)


def timed(label, fn, iters):
    t0 = time.perf_counter()
    out = fn()
    dt = (time.perf_counter() - t0) / iters
    print(f"{label:12s} {dt * 1000:7.1f} ms/iteration")
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=30)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    pair = form_blur(synth_sequence(random_scene(rng, args.size, 5), 1))
    mcfg = ModelConfig.desk(image_size=args.size)

    def cfg(stage):
        return TrainConfig(stage=stage, iterations=args.iters, batch_size=1,
                           seed=0, loss=LossConfig())

    res1 = timed("stage-1", lambda: train_autoencoder([pair], mcfg,
                                                      cfg("autoencoder")),
                 args.iters)
    stage1 = result_to_checkpoint(res1)
    timed("stage-2", lambda: train_bie([pair], mcfg, cfg("bie"), stage1),
          args.iters)
    timed("dm", lambda: train_dm([pair], mcfg, cfg("dm")), args.iters)


if __name__ == "__main__":
    main()
