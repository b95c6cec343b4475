#!/usr/bin/env python3
"""End-to-end demo at a reduced budget: synthesize data, run the three
training stages, then reconstruct a frame sequence from one blurred image.

Full-budget overfit runs live in tests/test_acceptance.py; this script is
for a quick look at the whole pipeline (a few minutes on a laptop CPU).
"""

import argparse
import sys
import time
from pathlib import Path

from blur2vid.cli import main as cli


def step(name, argv):
    print(f"\n=== {name}: blur2vid {' '.join(argv)}")
    t0 = time.time()
    rc = cli(argv)
    print(f"=== {name} finished in {time.time() - t0:.1f}s (exit {rc})")
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="demo_run")
    ap.add_argument("--iters", type=int, default=300,
                    help="per-stage iteration budget")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    root = Path(args.workdir)
    data = root / "data"
    it = str(args.iters)
    seed = str(args.seed)

    step("synth", ["synth", "--count", "4", "--frames", "5", "--size", "64",
                   "--seed", seed, "--out", str(data)])
    step("train-ae", ["train-ae", "--dataset", str(data), "--out",
                      str(root / "ae.ck"), "--iters", it, "--batch", "1",
                      "--seed", seed])
    step("train-bie", ["train-bie", "--dataset", str(data), "--stage1",
                       str(root / "ae.ck"), "--out", str(root / "bie.ck"),
                       "--iters", it, "--batch", "1", "--seed", seed])
    step("train-dm", ["train-dm", "--dataset", str(data), "--out",
                      str(root / "dm.ck"), "--iters", it, "--batch", "1",
                      "--seed", seed])
    step("infer", ["infer", "--blurred", str(data / "seq_00000" / "blur.png"),
                   "--dm", str(root / "dm.ck"), "--bie", str(root / "bie.ck"),
                   "--out", str(root / "reconstruction")])
    step("eval", ["eval", "--dataset", str(data), "--bie",
                  str(root / "bie.ck"), "--dm", str(root / "dm.ck")])
    print(f"\nartifacts in {root}/ (reconstruction PNGs in "
          f"{root / 'reconstruction'})")


if __name__ == "__main__":
    main()
