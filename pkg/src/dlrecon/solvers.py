"""Classical reconstruction: pseudoinverse LS, projected-gradient LS-NN, FISTA PLS-TV.

All iterative solvers assume an operator normalised to unit spectral norm,
so the default step of 0.75 is below 2/L.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .linops import SvdFactors, pseudoinverse_apply
from .projector import SystemMatrix, apply, apply_adjoint


@dataclass(frozen=True)
class SolverConfig:
    step_size: float = 0.75
    rel_change_tol: float = 1e-3
    max_iters: int = 2000
    tv_lambda: float = 0.0
    tv_inner_iters: int = 20

    def __post_init__(self):
        if not 0.0 < self.step_size < 2.0:
            raise ValueError("step_size must lie in (0, 2) for a unit-norm operator")
        if self.rel_change_tol < 0:
            raise ValueError("rel_change_tol must be non-negative")
        if self.tv_lambda < 0:
            raise ValueError("tv_lambda must be non-negative")
        if self.max_iters < 0 or self.tv_inner_iters < 1:
            raise ValueError("iteration counts must be positive")


@dataclass
class SolveReport:
    iterations_run: int = 0
    objective_trace: list[float] = field(default_factory=list)
    change_trace: list[float] = field(default_factory=list)
    converged: bool = False

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "relative_change"])
            for k, (obj, ch) in enumerate(zip(self.objective_trace, self.change_trace), start=1):
                w.writerow([k, repr(obj), repr(ch)])


def data_objective(H: SystemMatrix, f: np.ndarray, g: np.ndarray) -> float:
    r = apply(H, f) - g
    return 0.5 * float(np.vdot(r, r))


def gradient_step(H: SystemMatrix, f: np.ndarray, g: np.ndarray, step: float) -> np.ndarray:
    """One gradient step on 0.5 ||Hf - g||^2."""
    return f - step * apply_adjoint(H, apply(H, f) - g)


def relative_change(new: np.ndarray, old: np.ndarray) -> float:
    diff = np.linalg.norm(new - old)
    ref = np.linalg.norm(old)
    if ref == 0.0:
        return 0.0 if diff == 0.0 else np.inf
    return float(diff / ref)


def solve_ls(factors: SvdFactors, g: np.ndarray) -> np.ndarray:
    return pseudoinverse_apply(factors, g)


def solve_ls_nn(H: SystemMatrix, g: np.ndarray, init: np.ndarray | None = None,
                config: SolverConfig = SolverConfig(),
                callback: Callable[[int, np.ndarray], None] | None = None) -> tuple[np.ndarray, SolveReport]:
    """Projected gradient descent for min 0.5||Hf - g||^2 subject to f >= 0.

    ``callback(k, f)`` sees every iterate.  Stops once the relative l2
    change between consecutive iterates drops below ``rel_change_tol``.
    """
    f = np.zeros(H.image_shape) if init is None else np.asarray(init, dtype=float)
    if f.shape != H.image_shape:
        raise ValueError(f"initial image shape {f.shape} != {H.image_shape}")
    report = SolveReport()
    for k in range(1, config.max_iters + 1):
        f_new = np.maximum(gradient_step(H, f, g, config.step_size), 0.0)
        change = relative_change(f_new, f)
        f = f_new
        report.iterations_run = k
        report.objective_trace.append(data_objective(H, f, g))
        report.change_trace.append(change)
        if callback is not None:
            callback(k, f)
        if change < config.rel_change_tol:
            report.converged = True
            break
    return f, report


# --- total variation -------------------------------------------------------

def grad2d(x: np.ndarray) -> np.ndarray:
    """Forward differences with reflexive boundary; returns shape (2, *x.shape)."""
    g = np.zeros((2,) + x.shape)
    g[0, :-1, :] = x[1:, :] - x[:-1, :]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def div2d(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of ``grad2d``."""
    py, px = p[0], p[1]
    d = np.zeros(py.shape)
    d[:-1, :] += py[:-1, :]
    d[1:, :] -= py[:-1, :]
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    return d


def total_variation(x: np.ndarray) -> float:
    g = grad2d(x)
    return float(np.sum(np.sqrt(g[0] ** 2 + g[1] ** 2)))


def tv_prox(v: np.ndarray, weight: float, iters: int = 20,
            p0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """argmin_x 0.5||x - v||^2 + weight * TV(x) by accelerated dual projection.

    Returns the primal solution and the dual field, which may warm-start
    the next call.
    """
    if weight <= 0:
        return v.copy(), np.zeros((2,) + v.shape)
    p = np.zeros((2,) + v.shape) if p0 is None else p0.copy()
    r = p.copy()
    t = 1.0
    tau = 1.0 / (8.0 * weight)
    for _ in range(iters):
        q = r + tau * grad2d(v + weight * div2d(r))
        norm = np.maximum(1.0, np.sqrt(q[0] ** 2 + q[1] ** 2))
        p_new = q / norm
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        r = p_new + ((t - 1.0) / t_new) * (p_new - p)
        p, t = p_new, t_new
    return v + weight * div2d(p), p


def pls_tv_objective(H: SystemMatrix, f: np.ndarray, g: np.ndarray, lam: float) -> float:
    return data_objective(H, f, g) + lam * total_variation(f)


def solve_pls_tv(H: SystemMatrix, g: np.ndarray, config: SolverConfig = SolverConfig(),
                 init: np.ndarray | None = None) -> tuple[np.ndarray, SolveReport]:
    """FISTA on 0.5||Hf - g||^2 + lambda TV(f) with f >= 0, started from zeros.

    The proximal step is the TV prox (dual field warm-started across outer
    iterations) followed by clamping to the non-negative orthant.  Momentum
    is reset whenever the objective increases; with a 20-step inner prox the
    un-restarted scheme can cycle for large lambda.
    """
    x = np.zeros(H.image_shape) if init is None else np.asarray(init, dtype=float)
    y = x
    t = 1.0
    p = None
    weight = config.step_size * config.tv_lambda
    obj = pls_tv_objective(H, x, g, config.tv_lambda)
    report = SolveReport()
    for k in range(1, config.max_iters + 1):
        v = gradient_step(H, y, g, config.step_size)
        x_new, p = tv_prox(v, weight, config.tv_inner_iters, p)
        x_new = np.maximum(x_new, 0.0)
        obj_new = pls_tv_objective(H, x_new, g, config.tv_lambda)
        if obj_new > obj:
            t_new = 1.0
            y = x_new
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        change = relative_change(x_new, x)
        x, t, obj = x_new, t_new, obj_new
        report.iterations_run = k
        report.objective_trace.append(obj)
        report.change_trace.append(change)
        if change < config.rel_change_tol:
            report.converged = True
            break
    return x, report


def default_lambda_grid(num: int = 12, low: float = 1e-4, high: float = 1e1) -> list[float]:
    return [float(v) for v in np.logspace(np.log10(low), np.log10(high), num)]


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def sweep_lambda(H: SystemMatrix, g: np.ndarray, truth: np.ndarray, grid: Sequence[float],
                 config: SolverConfig = SolverConfig()) -> tuple[float, np.ndarray]:
    """Grid point whose PLS-TV image has the lowest RMSE against ``truth``.

    Ties go to the smaller lambda.
    """
    best = select_lambda(H, [g], [truth], grid, config)
    return best[0], best[2][0]


def select_lambda(H: SystemMatrix, sinograms: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                  grid: Sequence[float], config: SolverConfig = SolverConfig(),
                  mapper: Callable = map) -> tuple[float, list[float], list[np.ndarray]]:
    """Lambda minimising the mean RMSE over several (sinogram, truth) pairs.

    Returns (best lambda, mean RMSE per grid point in ascending-lambda
    order, images at the best lambda).
    """
    if len(grid) == 0:
        raise ValueError("lambda grid is empty")
    if len(sinograms) != len(truths) or not sinograms:
        raise ValueError("need matching, non-empty sinogram and truth lists")
    best_lam, best_score, best_images = None, np.inf, None
    scores = []
    for lam in sorted(grid):
        cfg = replace(config, tv_lambda=float(lam))
        images = list(mapper(lambda g: solve_pls_tv(H, g, cfg)[0], sinograms))
        score = float(np.mean([_rmse(im, tr) for im, tr in zip(images, truths)]))
        scores.append(score)
        if score < best_score:
            best_lam, best_score, best_images = float(lam), score, images
    return best_lam, scores, best_images
