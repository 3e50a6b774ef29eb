"""Full reference experiment: every strategy on the default stream over several seeds.

Equivalent to ``odil run --seeds N`` followed by ``odil report``; prints the
average-accuracy table and the final-step comparison.

    python scripts/reference_experiment.py --seeds 10 --out runs/reference
"""

import argparse
import sys
from pathlib import Path

from odil.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", default="runs/reference")
    p.add_argument("--strategy", action="append", help="restrict to these strategies (repeatable)")
    p.add_argument("--force", action="store_true")
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    run = ["-v", "run", "--seeds", str(args.seeds), "--out", args.out]
    for s in args.strategy or []:
        run += ["--strategy", s]
    if args.force:
        run.append("--force")
    code = main(run)
    if code:
        sys.exit(code)
    reports = sorted(str(p) for p in (Path(args.out) / "reports").glob("*.json"))
    sys.exit(main(["report", *reports, "--out", str(Path(args.out) / "report")]))
