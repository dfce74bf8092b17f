#!/usr/bin/env python3
"""Train the clean model, run both poisoning attacks, and score them.

Produces a run directory with checkpoints, trigger files, poison manifests,
results.csv, and a rendered report.md:

    python scripts/run_attack_pipeline.py --out runs --run-id demo --seed 0
"""

import argparse
import sys
from pathlib import Path

from mclab.cli import main as cli


def run(argv: list[str]) -> None:
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs", help="parent directory for runs")
    ap.add_argument("--run-id", default="demo")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="optional TOML config overriding defaults")
    args = ap.parse_args()

    pretrain = ["pretrain", "--run-id", args.run_id, "--seed", str(args.seed),
                "--out", args.out]
    if args.config:
        pretrain += ["--config", args.config]
    run(pretrain)

    run_dir = str(Path(args.out) / args.run_id)
    for attack in ("badclip", "fixed_patch"):
        run(["attack", "--run-dir", run_dir, "--attack", attack])
        run(["evaluate", "--run-dir", run_dir, "--attack", attack,
             "--task", "both"])
    run(["evaluate", "--run-dir", run_dir, "--attack", "none", "--task", "both"])
    run(["report", "--run-dir", run_dir])
    print(f"\nartifacts in {run_dir}", file=sys.stderr)


if __name__ == "__main__":
    main()
