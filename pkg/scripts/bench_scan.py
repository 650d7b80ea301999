#!/usr/bin/env python3
"""Sweep the scan benchmark over sequence lengths and write one CSV.

    python scripts/bench_scan.py --csv scan_bench.csv
"""

import argparse
import csv
import sys

import numpy as np

from panomamba.ssm import bench_scan

COLUMNS = ["L", "N", "D", "variant", "wall_ns", "max_abs_err"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", type=int, nargs="+", default=[64, 256, 1024, 4096])
    ap.add_argument("--N", type=int, default=16)
    ap.add_argument("--D", type=int, default=8)
    ap.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()
    dtype = np.float64 if args.dtype == "f64" else np.float32
    out = open(args.csv, "w", newline="") if args.csv else sys.stdout
    w = csv.writer(out)
    w.writerow(COLUMNS)
    for L in args.lengths:
        for variant in ("seq", "parallel"):
            row = bench_scan(L, args.N, args.D, variant, dtype=dtype)
            w.writerow([row[c] for c in COLUMNS])
    if args.csv:
        out.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
