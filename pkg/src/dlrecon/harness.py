"""Datasets, noise, and the end-to-end experiment behind the report tables."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import Case, ExperimentConfig
from .io import write_image, write_pgm, write_raw
from .linops import SvdFactors, cached_svd, pseudoinverse_apply
from .metrics import rmse, ssim
from .neural import Network, load_network, save_network
from .phantom import EllipsePhantom, analytic_sinogram, generate_phantom, rasterize, write_phantoms
from .projector import ScanGeometry, SystemMatrix, apply, build_system_matrix
from .recon import ReconConfig, reconstruct, train_stage1, train_stage2
from .solvers import select_lambda, solve_ls_nn, solve_pls_tv, sweep_lambda

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_SPLIT_OFFSET = {"train": 0, "val": 1_000_000, "test": 2_000_000}
_NOISE_STREAM = 0x6E6F6973
REPORT_FIELDS = ["method", "scenario", "mean_rmse", "mean_ssim", "std_rmse", "std_ssim", "n_images", "status"]
METHODS = ("baseline", "PLS-TV", "single-pass", "proposed")


class StageError(RuntimeError):
    def __init__(self, stage: str, case: str, cause: BaseException):
        super().__init__(f"[{case}] stage '{stage}' failed: {cause}")
        self.stage, self.case, self.cause = stage, case, cause


@dataclass
class Sample:
    phantom: EllipsePhantom
    truth: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        return self.clean if self.noisy is None else self.noisy


@dataclass
class Dataset:
    split: str
    case: Case
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def truths(self) -> list[np.ndarray]:
        return [s.truth for s in self.samples]

    @property
    def sinograms(self) -> list[np.ndarray]:
        return [s.data for s in self.samples]


def add_noise(g: np.ndarray, fraction: float, seed) -> np.ndarray:
    """Add i.i.d. Gaussian noise with standard deviation ``fraction * max(g)``."""
    if fraction < 0:
        raise ValueError("noise fraction must be non-negative")
    g = np.asarray(g, dtype=np.float64)
    if fraction == 0:
        return g.copy()
    rng = np.random.default_rng(seed)
    return g + rng.normal(0.0, fraction * float(g.max()), g.shape)


def split_seeds(config: ExperimentConfig, split: str) -> list[int]:
    count = {"train": config.n_train, "val": config.n_val, "test": config.n_test}[split]
    base = config.seed * 10_000_000 + _SPLIT_OFFSET[split]
    return list(range(base, base + count))


def case_geometry(config: ExperimentConfig, case: Case) -> ScanGeometry:
    return ScanGeometry.limited_view(case.angular_range, config.num_detectors, config.angle_start)


def generate_dataset(config: ExperimentConfig, split: str, case: Case | None = None,
                     H: SystemMatrix | None = None) -> Dataset:
    """Phantoms, ground-truth images and (raw, unnormalised) sinograms for one split.

    Inverse-crime data are ``H @ truth``; the other scenarios use the exact
    analytic line integrals of the ellipses.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    case = case or config.cases[0]
    geometry = case_geometry(config, case)
    if case.scenario == "inverse_crime":
        if H is None:
            H = build_system_matrix(geometry, config.side)
        if H.scale != 1.0:
            raise ValueError("inverse-crime data must come from the raw operator")
    noise = config.noise_for(case)
    samples = []
    for seed in split_seeds(config, split):
        phantom = generate_phantom(seed, config.phantom)
        truth = rasterize(phantom, config.side)
        if case.scenario == "inverse_crime":
            clean = apply(H, truth)
        else:
            clean = analytic_sinogram(phantom, geometry)
        noisy = add_noise(clean, noise, [seed, _NOISE_STREAM]) if noise > 0 else None
        samples.append(Sample(phantom, truth, clean, noisy))
    return Dataset(split, case, samples)


def save_dataset(dataset: Dataset, directory: str | Path, geometry: ScanGeometry) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_phantoms(directory / "phantoms.jsonl", [s.phantom for s in dataset.samples])
    meta = {"split": dataset.split, "scenario": dataset.case.scenario, "count": len(dataset)}
    write_raw(directory / "truths.raw", np.stack(dataset.truths), {**meta, "side": dataset.truths[0].shape[0]})
    sino_meta = {**meta, "num_views": geometry.num_views, "num_detectors": geometry.num_detectors,
                 "geometry": geometry.to_dict()}
    write_raw(directory / "sinograms_clean.raw", np.stack([s.clean for s in dataset.samples]), sino_meta)
    if dataset.samples[0].noisy is not None:
        write_raw(directory / "sinograms_noisy.raw", np.stack([s.noisy for s in dataset.samples]), sino_meta)


def _mapper(workers: int) -> Callable:
    if workers <= 1:
        return map

    def pooled(fn, items):
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return pooled


class CaseRun:
    """All stages of one (scenario, angular range) case; artifacts go under ``directory``."""

    def __init__(self, config: ExperimentConfig, case: Case, directory: Path):
        self.config, self.case, self.directory = config, case, Path(directory)
        self.geometry = case_geometry(config, case)
        self.map = _mapper(config.workers)
        self._raw: SystemMatrix | None = None
        self._factors: SvdFactors | None = None
        self._datasets: dict[str, Dataset] = {}
        self.timings: dict[str, float] = {}

    # -- shared ingredients
    @property
    def raw_operator(self) -> SystemMatrix:
        if self._raw is None:
            self._raw = build_system_matrix(self.geometry, self.config.side)
        return self._raw

    @property
    def operator(self) -> SystemMatrix:
        return self.raw_operator.normalized()

    @property
    def recon_config(self) -> ReconConfig:
        c = self.config
        return ReconConfig(c.n_outer, c.r_operator_for(self.case), c.solver, c.n_collect, c.stage2_inputs)

    @property
    def needs_factors(self) -> bool:
        return self.recon_config.r_operator == "ls_pinv" or self.case.scenario == "inverse_crime"

    @property
    def factors(self) -> SvdFactors | None:
        if self._factors is None and self.needs_factors:
            self._factors = cached_svd(self.operator, self.directory.parent / "svd_cache",
                                       self.config.svd_truncation)
        return self._factors

    def dataset(self, split: str) -> Dataset:
        if split not in self._datasets:
            H = self.raw_operator if self.case.scenario == "inverse_crime" else None
            self._datasets[split] = generate_dataset(self.config, split, self.case, H)
        return self._datasets[split]

    def normalized_data(self, split: str) -> list[np.ndarray]:
        H = self.operator
        return [H.normalize_data(g) for g in self.dataset(split).sinograms]

    def weights_path(self, stage: int) -> Path:
        return self.directory / "weights" / f"stage{stage}.json"

    # -- stages
    def stage(self, name: str, fn: Callable, *args):
        t0 = time.perf_counter()
        try:
            out = fn(*args)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, self.case.name, exc) from exc
        self.timings[name] = time.perf_counter() - t0
        return out

    def gen_data(self) -> None:
        for split in SPLITS:
            if split == "val" and self.config.n_val == 0:
                continue
            save_dataset(self.dataset(split), self.directory / "data" / split, self.geometry)

    def train(self, stages: Sequence[int] = (1, 2)) -> Network:
        c = self.config
        H = self.operator
        truths = self.dataset("train").truths
        data = self.normalized_data("train")
        net = None
        if 1 in stages:
            net = train_stage1(truths, data, H, c.network, c.train, self.recon_config, self.factors,
                               mapper=self.map, log_every=c.log_every, log=log.info)
            save_network(net, self.weights_path(1), {"case": self.case.name})
        if 2 in stages:
            if net is None:
                net = load_network(self.weights_path(1))
            net = train_stage2(net, truths, data, H, self.recon_config, c.stage2_train, self.factors,
                               mapper=self.map, log_every=c.log_every, log=log.info)
            save_network(net, self.weights_path(2), {"case": self.case.name})
        return net

    def network(self) -> Network:
        return load_network(self.weights_path(2))

    def choose_lambda(self) -> tuple[float | None, list[float]]:
        c = self.config
        if c.lambda_selection == "oracle":
            return None, []
        n = min(c.n_val_lambda, c.n_val)
        lam, scores, _ = select_lambda(self.operator, self.normalized_data("val")[:n],
                                       self.dataset("val").truths[:n], c.lambda_grid, c.solver, self.map)
        with open(self.directory / "lambda_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "mean_rmse"])
            for l, s in zip(sorted(c.lambda_grid), scores):
                w.writerow([repr(float(l)), repr(s)])
        return lam, scores

    def baseline(self, g: np.ndarray) -> np.ndarray:
        if self.recon_config.r_operator == "ls_pinv":
            return pseudoinverse_apply(self.factors, g)
        return solve_ls_nn(self.operator, g, config=self.config.solver)[0]

    def pls_tv(self, g: np.ndarray, truth: np.ndarray, lam: float | None) -> np.ndarray:
        if lam is None:
            return sweep_lambda(self.operator, g, truth, self.config.lambda_grid, self.config.solver)[1]
        return solve_pls_tv(self.operator, g, replace(self.config.solver, tv_lambda=lam))[0]

    def evaluate(self, net: Network | None = None) -> dict[str, list[tuple[float, float]]]:
        """Per-image (rmse, ssim) for every method on the test split; writes per-case outputs."""
        c = self.config
        net = net or self.network()
        H, rc, factors = self.operator, self.recon_config, self.factors
        lam, _ = self.choose_lambda()
        test = self.dataset("test")
        data = self.normalized_data("test")

        def one(i):
            g, truth = data[i], test.samples[i].truth
            img, trace = reconstruct(g, H, net, rc, factors)
            return {
                "baseline": self.baseline(g),
                "PLS-TV": self.pls_tv(g, truth, lam),
                "single-pass": trace[0].f_Q,
                "proposed": img,
            }

        results = list(self.map(one, range(len(test))))
        scores: dict[str, list[tuple[float, float]]] = {m: [] for m in METHODS}
        with open(self.directory / "per_image.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "seed", "method", "rmse", "ssim"])
            for i, (sample, images) in enumerate(zip(test.samples, results)):
                rng = float(sample.truth.max() - sample.truth.min())
                for m in METHODS:
                    r, s = rmse(images[m], sample.truth), ssim(images[m], sample.truth, data_range=rng)
                    scores[m].append((r, s))
                    w.writerow([i, sample.phantom.seed, m, repr(r), repr(s)])
                if i < c.dump_images:
                    self._dump(i, sample, images)
        self._trace(net)
        return scores

    def _dump(self, i: int, sample: Sample, images: dict) -> None:
        out = self.directory / "images"
        lo, hi = float(sample.truth.min()), float(sample.truth.max())
        for name, img in [("truth", sample.truth)] + list(images.items()):
            stem = f"test{i:03d}_{name}"
            write_image(out / f"{stem}.raw", img, seed=sample.phantom.seed, method=name)
            write_pgm(out / f"{stem}.pgm", img, lo, hi)

    def _trace(self, net: Network) -> None:
        if self.factors is None:
            return
        i = self.config.trace_image
        g = self.normalized_data("test")[i]
        truth = self.dataset("test").samples[i].truth
        _, trace = reconstruct(g, self.operator, net, self.recon_config, self.factors, truth=truth,
                               keep_images=False)
        trace.write_csv(self.directory / "trace_fig1.csv")


def summarize(scores: dict[str, list[tuple[float, float]]], case: Case, baseline_name: str) -> list[dict]:
    rows = []
    for m in METHODS:
        vals = np.array(scores[m])
        rows.append({
            "method": baseline_name if m == "baseline" else m,
            "scenario": case.name,
            "mean_rmse": repr(float(vals[:, 0].mean())),
            "mean_ssim": repr(float(vals[:, 1].mean())),
            "std_rmse": repr(float(vals[:, 0].std())),
            "std_ssim": repr(float(vals[:, 1].std())),
            "n_images": len(vals),
            "status": "ok",
        })
    return rows


def failed_rows(case: Case, baseline_name: str) -> list[dict]:
    return [{"method": baseline_name if m == "baseline" else m, "scenario": case.name,
             "mean_rmse": "", "mean_ssim": "", "std_rmse": "", "std_ssim": "", "n_images": 0,
             "status": "failed"} for m in METHODS]


def write_report(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)


def baseline_name(config: ExperimentConfig, case: Case) -> str:
    return "LS" if config.r_operator_for(case) == "ls_pinv" else "LS-NN"


def run_experiment(config: ExperimentConfig, stages: Sequence[str] = ("data", "train", "evaluate")) -> Path:
    """Run every configured case end to end and write ``report.csv`` under the output directory.

    A failing stage marks the remaining cells as failed, writes the partial
    report plus a ``FAILED`` file, and re-raises as ``StageError``.
    """
    out = config.output_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    (out / "FAILED").unlink(missing_ok=True)
    rows: list[dict] = []
    timings = {}
    error = None
    for case in config.cases:
        name = baseline_name(config, case)
        if error is not None:
            rows += failed_rows(case, name)
            continue
        run = CaseRun(config, case, out / case.name)
        run.directory.mkdir(parents=True, exist_ok=True)
        try:
            if "data" in stages:
                run.stage("data", run.gen_data)
            net = run.stage("train", run.train) if "train" in stages else None
            if "evaluate" in stages:
                scores = run.stage("evaluate", run.evaluate, net)
                rows += summarize(scores, case, name)
        except StageError as exc:
            error = exc
            rows += failed_rows(case, name)
            (out / "FAILED").write_text(f"{exc}\n")
        timings[case.name] = run.timings
    if "evaluate" in stages:
        write_report(out / "report.csv", rows)
    (out / "timings.json").write_text(json.dumps(timings, indent=2))
    if error is not None:
        raise error
    return out
