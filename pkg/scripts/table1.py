"""Run the full pipeline for a config and print the per-method RMSE / SSIM summary.

    python scripts/table1.py configs/acceptance.json --set n_test=100
"""

import argparse
import csv
import sys

from dlrecon.config import ExperimentConfig
from dlrecon.harness import run_experiment


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[])
    args = p.parse_args()
    out = run_experiment(ExperimentConfig.load(args.config, args.overrides))
    rows = list(csv.DictReader(open(out / "report.csv")))
    print(f"{'scenario':<10} {'method':<12} {'RMSE':>8} {'SSIM':>8}")
    for r in rows:
        if r["status"] != "ok":
            print(f"{r['scenario']:<10} {r['method']:<12} {'failed':>8}")
            continue
        print(f"{r['scenario']:<10} {r['method']:<12} {float(r['mean_rmse']):8.4f} {float(r['mean_ssim']):8.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
