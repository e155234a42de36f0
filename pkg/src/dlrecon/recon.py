"""Alternating reconstruction: a data-fidelity operator R followed by a learned map Q.

Starting from f_Q = 0, each outer iteration computes f_R = R(f_Q; H, g) and
then f_Q = Q(f_R).  Two-stage training first fits Q to R(0) inputs and then
fine-tunes it on the R outputs met while running the loop with the
first-stage weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .linops import SpaceProjectors, SvdFactors, pseudoinverse_apply
from .neural import Network, NetworkSpec, TrainConfig, forward, init_network, train
from .solvers import SolveReport, SolverConfig, gradient_step, solve_ls_nn
from .projector import SystemMatrix

R_OPERATORS = ("ls_pinv", "ls_nn_pgd", "gradient_step")

QOperator = Union[Network, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class ReconConfig:
    n_outer: int = 5
    r_operator: str = "ls_pinv"
    solver: SolverConfig = SolverConfig()
    n_collect: int = 10
    stage2_inputs: str = "f_R"

    def __post_init__(self):
        if self.n_outer < 1 or self.n_collect < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.r_operator not in R_OPERATORS:
            raise ValueError(f"r_operator must be one of {R_OPERATORS}")
        if self.stage2_inputs not in ("f_R", "f_Q"):
            raise ValueError("stage2_inputs must be 'f_R' or 'f_Q'")


@dataclass
class IterationRecord:
    k: int
    f_R: np.ndarray | None
    f_Q: np.ndarray | None
    rmse_meas_R: float = float("nan")
    rmse_meas_Q: float = float("nan")
    rmse_null_R: float = float("nan")
    rmse_null_Q: float = float("nan")
    solve_report: SolveReport | None = None


@dataclass
class IterationTrace:
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> IterationRecord:
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "rmse_meas_R", "rmse_meas_Q", "rmse_null_Q"])
            for r in self.records:
                w.writerow([r.k, repr(r.rmse_meas_R), repr(r.rmse_meas_Q), repr(r.rmse_null_Q)])


def apply_q(q: QOperator, f: np.ndarray) -> np.ndarray:
    if isinstance(q, Network):
        return forward(q, f)
    return np.asarray(q(f), dtype=np.float64)


class ReconstructionOperator:
    """R(f; H, g) for one fixed data vector; caches H^+ g for the pseudoinverse variant."""

    def __init__(self, H: SystemMatrix, g: np.ndarray, config: ReconConfig,
                 factors: SvdFactors | None = None):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != H.geometry.shape:
            raise ValueError(f"sinogram shape {g.shape} != {H.geometry.shape}")
        self.H, self.g, self.config, self.factors = H, g, config, factors
        self._ls = None
        if config.r_operator == "ls_pinv":
            if factors is None:
                raise ValueError("the pseudoinverse operator needs SVD factors")
            self._ls = pseudoinverse_apply(factors, g)

    def __call__(self, f: np.ndarray) -> tuple[np.ndarray, SolveReport | None]:
        op = self.config.r_operator
        if op == "ls_pinv":
            # minimum-norm LS solution plus the warm start's null-space part
            return self._ls + self.factors.projectors.project_null(f), None
        if op == "ls_nn_pgd":
            return solve_ls_nn(self.H, self.g, init=f, config=self.config.solver)
        return gradient_step(self.H, f, self.g, self.config.solver.step_size), None


def reconstruct(g: np.ndarray, H: SystemMatrix, q: QOperator, config: ReconConfig,
                factors: SvdFactors | None = None, truth: np.ndarray | None = None,
                projectors: SpaceProjectors | None = None, n_outer: int | None = None,
                keep_images: bool = True) -> tuple[np.ndarray, IterationTrace]:
    """Run the alternating scheme for ``n_outer`` (default ``config.n_outer``) iterations."""
    n = config.n_outer if n_outer is None else n_outer
    if n < 1:
        raise ValueError("n_outer must be >= 1")
    R = ReconstructionOperator(H, g, config, factors)
    if projectors is None and factors is not None and truth is not None:
        projectors = factors.projectors
    scale = np.sqrt(H.shape[1])
    f_q = np.zeros(H.image_shape)
    trace = IterationTrace()
    for k in range(1, n + 1):
        f_r, report = R(f_q)
        f_q = apply_q(q, f_r)
        rec = IterationRecord(k, f_r if keep_images else None, f_q if keep_images else None,
                              solve_report=report)
        if truth is not None and projectors is not None:
            e_r, e_q = f_r - truth, f_q - truth
            m_r, m_q = projectors.project_measurable(e_r), projectors.project_measurable(e_q)
            rec.rmse_meas_R = float(np.linalg.norm(m_r) / scale)
            rec.rmse_meas_Q = float(np.linalg.norm(m_q) / scale)
            rec.rmse_null_R = float(np.linalg.norm(e_r - m_r) / scale)
            rec.rmse_null_Q = float(np.linalg.norm(e_q - m_q) / scale)
        trace.records.append(rec)
    return f_q, trace


def single_pass(g: np.ndarray, H: SystemMatrix, q: QOperator, config: ReconConfig,
                factors: SvdFactors | None = None) -> np.ndarray:
    """Q(R(0)), i.e. one outer iteration."""
    return reconstruct(g, H, q, config, factors, n_outer=1)[0]


def stage1_inputs(sinograms: Sequence[np.ndarray], H: SystemMatrix, config: ReconConfig,
                  factors: SvdFactors | None = None, mapper: Callable = map) -> list[np.ndarray]:
    """R applied to an all-zeros initial guess for each sinogram."""
    zero = np.zeros(H.image_shape)
    return list(mapper(lambda g: ReconstructionOperator(H, g, config, factors)(zero)[0], sinograms))


def train_stage1(truths: Sequence[np.ndarray], sinograms: Sequence[np.ndarray], H: SystemMatrix,
                 spec: NetworkSpec, train_config: TrainConfig, config: ReconConfig,
                 factors: SvdFactors | None = None, net: Network | None = None,
                 mapper: Callable = map, log_every: int = 0, log=print) -> Network:
    if not len(truths):
        raise ValueError("stage-1 training needs a non-empty dataset")
    inputs = stage1_inputs(sinograms, H, config, factors, mapper)
    net = init_network(spec, train_config.seed) if net is None else net
    train(net, inputs, truths, train_config, log_every=log_every, log=log)
    net.metadata.update(stage=1, pairs=len(inputs), iterations=train_config.iterations)
    return net


def stage2_pairs(net: Network, truths: Sequence[np.ndarray], sinograms: Sequence[np.ndarray],
                 H: SystemMatrix, config: ReconConfig, factors: SvdFactors | None = None,
                 mapper: Callable = map) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Inputs met during ``n_collect`` outer iterations with frozen weights, each paired with its truth.

    Ordering is image-major: image i contributes its k = 1..n_collect inputs
    consecutively.
    """
    key = config.stage2_inputs

    def collect(g):
        _, trace = reconstruct(g, H, net, config, factors, n_outer=config.n_collect)
        return [getattr(r, key) for r in trace.records]

    inputs, targets = [], []
    for truth, collected in zip(truths, mapper(collect, sinograms)):
        inputs.extend(collected)
        targets.extend([truth] * len(collected))
    return inputs, targets


def train_stage2(net_stage1: Network, truths: Sequence[np.ndarray], sinograms: Sequence[np.ndarray],
                 H: SystemMatrix, config: ReconConfig, train_config: TrainConfig,
                 factors: SvdFactors | None = None, mapper: Callable = map,
                 log_every: int = 0, log=print) -> Network:
    """Fine-tune a copy of the stage-1 network (fresh ADAM moments) on collected pairs."""
    if not len(truths):
        raise ValueError("stage-2 training needs a non-empty dataset")
    inputs, targets = stage2_pairs(net_stage1, truths, sinograms, H, config, factors, mapper)
    net = net_stage1.copy(reset_optimizer=True)
    train(net, inputs, targets, train_config, log_every=log_every, log=log)
    net.metadata.update(stage=2, pairs=len(inputs), iterations=train_config.iterations,
                        n_collect=config.n_collect)
    return net
