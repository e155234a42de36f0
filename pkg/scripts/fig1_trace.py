"""Measurable / null-space error of f_R and f_Q per outer iteration, averaged over test images.

Needs a finished inverse-crime run (weights/stage2.json under the case directory).

    python scripts/fig1_trace.py configs/acceptance.json --n-outer 10
"""

import argparse
import sys

import numpy as np

from dlrecon.config import ExperimentConfig
from dlrecon.harness import CaseRun
from dlrecon.recon import reconstruct


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[])
    p.add_argument("--n-outer", type=int, default=None)
    args = p.parse_args()
    cfg = ExperimentConfig.load(args.config, args.overrides)
    case = next((c for c in cfg.cases if c.scenario == "inverse_crime"), None)
    if case is None:
        print("config has no inverse-crime case", file=sys.stderr)
        return 1
    run = CaseRun(cfg, case, cfg.output_path() / case.name)
    net = run.network()
    cols = ("rmse_meas_R", "rmse_null_R", "rmse_meas_Q", "rmse_null_Q")
    table = []
    for g, s in zip(run.normalized_data("test"), run.dataset("test").samples):
        _, trace = reconstruct(g, run.operator, net, run.recon_config, run.factors, truth=s.truth,
                               n_outer=args.n_outer, keep_images=False)
        table.append([trace.column(c) for c in cols])
    mean = np.mean(table, axis=0)
    print("k  " + "  ".join(f"{c:>12}" for c in cols))
    for k in range(mean.shape[1]):
        print(f"{k + 1:<2} " + "  ".join(f"{mean[i, k]:12.3e}" for i in range(len(cols))))
    return 0


if __name__ == "__main__":
    sys.exit(main())
