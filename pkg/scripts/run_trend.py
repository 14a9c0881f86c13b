"""Train the four desk-scale configurations and check the landmark and variant trends.

Results land in ``<out-dir>/<key>/results.json`` where the key hashes the
configuration; the package source digest is stored alongside. An existing
result is reused unless ``--rerun`` is given.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from fflocal.experiments import TrendConfig, run_trend


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data-dir", default=".cache/desk-seed0", help="desk manifest (built if missing)")
    ap.add_argument("--out-dir", default=".cache/trend")
    ap.add_argument("--steps", type=int, default=TrendConfig.steps)
    ap.add_argument("--batch-size", type=int, default=TrendConfig.batch_size)
    ap.add_argument("--alpha", type=float, default=TrendConfig.alpha)
    ap.add_argument("--rerun", action="store_true")
    args = ap.parse_args()
    cfg = TrendConfig(steps=args.steps, batch_size=args.batch_size, alpha=args.alpha)
    out = Path(args.out_dir) / cfg.key()
    if (out / "results.json").exists() and not args.rerun:
        res = json.loads((out / "results.json").read_text())
    else:
        t0 = time.time()
        res = run_trend(args.data_dir, out, cfg, log=lambda s: print(f"[{time.time() - t0:7.0f}s] {s}", flush=True))
    print(json.dumps(res, indent=2, sort_keys=True))
    return 0 if res["passed"] else 3


if __name__ == "__main__":
    sys.exit(main())
