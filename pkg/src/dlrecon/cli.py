"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``) with dotted
``--set key=value`` overrides.  Relative output directories are resolved
against ``$DLRECON_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .harness import CaseRun, StageError, baseline_name, run_experiment, summarize, write_report
from .io import read_raw, write_image, write_pgm
from .neural import load_network
from .recon import reconstruct
from .solvers import sweep_lambda


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlrecon", description="Learned iterative limited-view CT reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.iterations=100")
        return sp

    add("gen-data", "generate and save train/val/test datasets")
    tr = add("train", "run two-stage training")
    tr.add_argument("--stage", choices=["1", "2", "both"], default="both")
    rc = add("reconstruct", "reconstruct one sinogram")
    rc.add_argument("--sinogram", type=Path, required=True, help="raw float32 sinogram with JSON sidecar")
    rc.add_argument("--weights", type=Path, required=True, help="network manifest (.json)")
    rc.add_argument("--n", type=int, default=None, help="outer iterations (default: config n_outer)")
    rc.add_argument("--out", type=Path, required=True, help="output raw image path")
    rc.add_argument("--index", type=int, default=0, help="slice to use when the sinogram file is a stack")
    rc.add_argument("--case", default=None, help="case name, e.g. 60D_IC (default: first case)")
    add("evaluate", "evaluate trained networks and baselines on the test split")
    sw = add("sweep-lambda", "select the PLS-TV weight on the validation split")
    sw.add_argument("--oracle-lambda", action="store_true",
                    help="pick lambda per test image by truth RMSE instead of on validation data")
    add("run-all", "data, training and evaluation for every configured case")
    return p


def _case(config: ExperimentConfig, name: str | None):
    if name is None:
        return config.cases[0]
    for case in config.cases:
        if case.name == name:
            return case
    raise ValueError(f"unknown case {name!r}; configured: {[c.name for c in config.cases]}")


def _runs(config: ExperimentConfig) -> list[CaseRun]:
    out = config.output_path()
    return [CaseRun(config, case, out / case.name) for case in config.cases]


def _evaluate(config: ExperimentConfig) -> None:
    rows = []
    for run in _runs(config):
        rows += summarize(run.stage("evaluate", run.evaluate), run.case, baseline_name(config, run.case))
    write_report(config.output_path() / "report.csv", rows)


def _sweep(config: ExperimentConfig, oracle: bool) -> None:
    for run in _runs(config):
        if oracle:
            test = run.dataset("test")
            lams = [sweep_lambda(run.operator, g, s.truth, config.lambda_grid, config.solver)[0]
                    for g, s in zip(run.normalized_data("test"), test.samples)]
            run.directory.mkdir(parents=True, exist_ok=True)
            (run.directory / "lambda_oracle.csv").write_text(
                "image,lambda\n" + "".join(f"{i},{lam!r}\n" for i, lam in enumerate(lams)))
        else:
            run.directory.mkdir(parents=True, exist_ok=True)
            lam, _ = run.stage("sweep-lambda", run.choose_lambda)
            print(f"{run.case.name}: lambda = {lam!r}")


def _reconstruct(config: ExperimentConfig, args) -> None:
    case = _case(config, args.case)
    run = CaseRun(config, case, config.output_path() / case.name)
    g, _ = read_raw(args.sinogram)
    if g.ndim == 3:
        if not 0 <= args.index < len(g):
            raise ValueError(f"--index {args.index} outside a stack of {len(g)} sinograms")
        g = g[args.index]
    if g.shape != run.geometry.shape:
        raise ValueError(f"sinogram shape {g.shape} does not match geometry {run.geometry.shape}")
    net = load_network(args.weights)
    H = run.operator
    image, _ = reconstruct(H.normalize_data(g), H, net, run.recon_config, run.factors, n_outer=args.n)
    write_image(args.out, image, n_outer=args.n or config.n_outer, case=case.name)
    write_pgm(Path(args.out).with_suffix(".pgm"), image)


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        config = ExperimentConfig.load(args.config, args.overrides)
        if args.command == "gen-data":
            for run in _runs(config):
                run.stage("data", run.gen_data)
        elif args.command == "train":
            stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
            for run in _runs(config):
                run.stage("train", run.train, stages)
        elif args.command == "reconstruct":
            _reconstruct(config, args)
        elif args.command == "evaluate":
            _evaluate(config)
        elif args.command == "sweep-lambda":
            _sweep(config, args.oracle_lambda)
        elif args.command == "run-all":
            out = run_experiment(config)
            print(out / "report.csv")
    except (StageError, ValueError, OSError, KeyError) as exc:
        print(f"dlrecon {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
