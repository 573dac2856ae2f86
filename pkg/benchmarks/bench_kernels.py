"""Time the numba kernels against their numpy/LAPACK fallbacks.

    python benchmarks/bench_kernels.py [--out kernels.csv] [--sizes 5 10 25 50 100]

Writes one CSV row per (kernel, size) with median microseconds for both
backends. ``METASOLVE_JIT`` does not matter here: both variants are called by
name.
"""

from __future__ import annotations

import argparse
import csv
import sys

from metasolve.bench import bench_kernels, write_csv


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out")
    ap.add_argument("--sizes", type=int, nargs="+", default=[5, 10, 25, 50, 100])
    ap.add_argument("--repeats", type=int, default=25)
    args = ap.parse_args()
    rows = bench_kernels(tuple(args.sizes), repeats=args.repeats)
    for r in rows:
        r["speedup"] = r["numpy_us"] / r["numba_us"]
    if args.out:
        write_csv(rows, args.out)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


if __name__ == "__main__":
    main()
