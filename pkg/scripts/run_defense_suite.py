#!/usr/bin/env python3
"""Run every defense and the trigger-inversion detector against a finished run.

Expects a run directory produced by run_attack_pipeline.py (or the `mclab`
CLI directly). Re-renders report.md at the end:

    python scripts/run_defense_suite.py --run-dir runs/demo
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
    ap.add_argument("--run-dir", required=True)
    ap.add_argument("--attacks", nargs="*", default=["badclip", "fixed_patch"])
    ap.add_argument("--defenses", nargs="*",
                    default=["finetune", "cleanclip", "abl"])
    args = ap.parse_args()

    for attack in args.attacks:
        for defense in args.defenses:
            run(["defend", "--run-dir", args.run_dir,
                 "--attack", attack, "--defense", defense])

    # inversion scan: clean model once, then each victim checkpoint
    run(["detect", "--run-dir", args.run_dir, "--attack", args.attacks[0]])
    for attack in args.attacks[1:]:
        ckpt = Path(args.run_dir) / f"poisoned_{attack}.ckpt"
        run(["detect", "--run-dir", args.run_dir, "--checkpoint", str(ckpt),
             "--model-name", f"poisoned_{attack}"])

    run(["report", "--run-dir", args.run_dir])
    print(f"\nupdated report in {args.run_dir}/report.md", file=sys.stderr)


if __name__ == "__main__":
    main()
