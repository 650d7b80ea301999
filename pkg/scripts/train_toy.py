#!/usr/bin/env python3
"""Train the toy out-painting system and plot nothing: a thin wrapper around
`panomamba train` for quick experiments.

    python scripts/train_toy.py --steps 2000 --out runs/toy
"""

import argparse
import os
import sys

from panomamba.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    argv = [
        "train",
        "--data-dir", os.path.join(args.out, "data"),
        "--steps", str(args.steps),
        "--ckpt-out", os.path.join(args.out, "model.ckpt"),
        "--loss-csv", os.path.join(args.out, "loss.csv"),
    ]
    if args.config:
        argv += ["--config", args.config]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
