#!/usr/bin/env python3
"""Reproduce the shape studies: ASR vs. patch size, poison budget, and the
loss-term ablation (text-only / visual-only / full / full+stratified).

Appends to <run-dir>/sweep.csv and re-renders report.md with the curves:

    python scripts/run_sweeps.py --run-dir runs/demo
"""

import argparse
import sys

from mclab.cli import main as cli


def run(argv: list[str]) -> None:
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run-dir", required=True)
    ap.add_argument("--patch-sizes", nargs="*", type=int,
                    default=[4, 8, 12, 16, 20])
    ap.add_argument("--poison-counts", nargs="*", type=int,
                    default=[3, 6, 12, 24])
    ap.add_argument("--epochs-scale", type=float, default=1.0,
                    help="shrink trigger-optimization epochs for quick looks")
    ap.add_argument("--skip-objective", action="store_true")
    args = ap.parse_args()

    run(["sweep", "--run-dir", args.run_dir, "--sweep", "patch_size",
         "--values", *[str(v) for v in args.patch_sizes],
         "--epochs-scale", str(args.epochs_scale)])
    run(["sweep", "--run-dir", args.run_dir, "--sweep", "poison_count",
         "--values", *[str(v) for v in args.poison_counts],
         "--epochs-scale", str(args.epochs_scale)])
    if not args.skip_objective:
        run(["sweep", "--run-dir", args.run_dir, "--sweep", "objective",
             "--epochs-scale", str(args.epochs_scale)])

    run(["report", "--run-dir", args.run_dir])
    print(f"\nsweep curves in {args.run_dir}/sweep.csv", file=sys.stderr)


if __name__ == "__main__":
    main()
