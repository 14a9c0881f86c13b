"""Overfit every mask-head variant on the 3-class toy manifest and report the scores."""
import argparse
import json
import sys

from fflocal.experiments import OverfitConfig, overfit_check


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data-dir", default=".cache/toy", help="toy manifest (built if missing)")
    ap.add_argument("--steps", type=int, default=OverfitConfig.steps)
    ap.add_argument("--seed", type=int, default=OverfitConfig.seed)
    args = ap.parse_args()
    res = overfit_check(args.data_dir, OverfitConfig(steps=args.steps, seed=args.seed), log=print)
    print(json.dumps(res, indent=2))
    return 0 if res["passed"] else 3


if __name__ == "__main__":
    sys.exit(main())
