"""Discrete parallel-beam forward operator built by ray tracing (line-length model)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

DEFAULT_MEMORY_BUDGET = 2 * 1024**3


class MemoryBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class ScanGeometry:
    """Parallel-beam geometry with ``num_views`` equally spaced views on [start, end).

    Angles are in degrees.  ``detector_spacing=None`` picks the spacing that
    makes the detector span the diagonal of the [-1, 1]^2 object square.
    """

    num_views: int
    angle_start: float
    angle_end: float
    num_detectors: int
    detector_spacing: float | None = None

    def __post_init__(self):
        if self.num_views < 1 or self.num_detectors < 1:
            raise ValueError("num_views and num_detectors must be >= 1")
        if not self.angle_end > self.angle_start:
            raise ValueError("angle_end must exceed angle_start")
        if self.detector_spacing is None:
            object.__setattr__(self, "detector_spacing", 2.0 * np.sqrt(2.0) / self.num_detectors)
        elif self.detector_spacing <= 0:
            raise ValueError("detector_spacing must be positive")

    @classmethod
    def limited_view(cls, coverage_deg: float, num_detectors: int, angle_start: float = 0.0,
                     views_per_degree: int = 1) -> "ScanGeometry":
        num_views = int(round(coverage_deg * views_per_degree))
        return cls(num_views, angle_start, angle_start + coverage_deg, num_detectors)

    @property
    def coverage(self) -> float:
        return self.angle_end - self.angle_start

    @property
    def angles(self) -> np.ndarray:
        """View angles in degrees; the end of the arc is excluded."""
        step = self.coverage / self.num_views
        return self.angle_start + step * np.arange(self.num_views)

    @property
    def detector_positions(self) -> np.ndarray:
        """Signed detector-centre offsets from the rotation axis."""
        return (np.arange(self.num_detectors) - (self.num_detectors - 1) / 2.0) * self.detector_spacing

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_views, self.num_detectors)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(**d)


def ray_pixel_lengths(theta_deg: float, s: float, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Intersection lengths of one ray with the pixel cells of a side x side grid.

    The ray is ``x cos(theta) + y sin(theta) = s`` over the square [-1, 1]^2.
    Returns (flat pixel indices, lengths); both empty when the ray misses.
    """
    th = np.deg2rad(theta_deg)
    nx, ny = np.cos(th), np.sin(th)
    dx, dy = -ny, nx
    px, py = s * nx, s * ny
    tmin, tmax = -np.inf, np.inf
    for p, d in ((px, dx), (py, dy)):
        if abs(d) < 1e-15:
            if not -1.0 <= p <= 1.0:
                return np.empty(0, np.int64), np.empty(0)
            continue
        t0, t1 = sorted(((-1.0 - p) / d, (1.0 - p) / d))
        tmin, tmax = max(tmin, t0), min(tmax, t1)
    if not tmax > tmin:
        return np.empty(0, np.int64), np.empty(0)

    grid = -1.0 + (2.0 / side) * np.arange(side + 1)
    ts = [np.array([tmin, tmax])]
    for p, d in ((px, dx), (py, dy)):
        if abs(d) >= 1e-15:
            t = (grid - p) / d
            ts.append(t[(t > tmin) & (t < tmax)])
    t = np.unique(np.concatenate(ts))
    lengths = np.diff(t)
    mid = 0.5 * (t[1:] + t[:-1])
    col = np.clip(np.floor((px + mid * dx + 1.0) * side / 2.0).astype(np.int64), 0, side - 1)
    row = np.clip(np.floor((py + mid * dy + 1.0) * side / 2.0).astype(np.int64), 0, side - 1)
    keep = lengths > 1e-14
    return (row * side + col)[keep], lengths[keep]


@dataclass(frozen=True)
class SystemMatrix:
    """Sparse forward operator mapping a side x side image to a sinogram.

    ``scale`` records the factor the raw ray-tracing matrix was divided by
    (1 for a raw operator); data must be divided by the same factor.
    """

    matrix: sp.csr_matrix
    geometry: ScanGeometry
    side: int
    norm_estimate: float
    scale: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.side, self.side)

    def normalized(self) -> "SystemMatrix":
        """Operator divided by its largest singular value (estimate becomes 1)."""
        sigma = self.norm_estimate
        return replace(self, matrix=(self.matrix / sigma).tocsr(), norm_estimate=1.0,
                       scale=self.scale * sigma)

    def normalize_data(self, g: np.ndarray) -> np.ndarray:
        return np.asarray(g) / self.scale

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def build_system_matrix(geometry: ScanGeometry, side: int,
                        memory_budget: int = DEFAULT_MEMORY_BUDGET) -> SystemMatrix:
    if side < 2:
        raise ValueError("image side must be >= 2")
    rays = geometry.num_views * geometry.num_detectors
    # each ray meets at most 2*side cells; 8-byte value + 4-byte index per entry
    worst_bytes = rays * 2 * side * 12
    if worst_bytes > memory_budget:
        raise MemoryBudgetError(
            f"system matrix may need {worst_bytes / 2**20:.0f} MiB, budget is {memory_budget / 2**20:.0f} MiB")

    indptr = [0]
    indices, data = [], []
    for theta in geometry.angles:
        for s in geometry.detector_positions:
            idx, lengths = ray_pixel_lengths(theta, s, side)
            order = np.argsort(idx, kind="stable")
            indices.append(idx[order])
            data.append(lengths[order])
            indptr.append(indptr[-1] + idx.size)
    matrix = sp.csr_matrix(
        (np.concatenate(data), np.concatenate(indices).astype(np.int32), np.asarray(indptr)),
        shape=(rays, side * side))
    matrix.sum_duplicates()
    return SystemMatrix(matrix, geometry, side, power_iteration_norm(matrix))


def power_iteration_norm(matrix, max_iters: int = 2000, tol: float = 1e-12) -> float:
    """Largest singular value of ``matrix`` by power iteration on A^T A."""
    x = np.ones(matrix.shape[1]) / np.sqrt(matrix.shape[1])
    est = 0.0
    for _ in range(max_iters):
        y = matrix.T @ (matrix @ x)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        if abs(norm - est) <= tol * norm:
            est = norm
            break
        est = norm
    return float(np.sqrt(est))


def _flat_images(H: SystemMatrix, f: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    f = np.asarray(f)
    n = H.shape[1]
    if f.shape[-2:] == H.image_shape:
        lead = f.shape[:-2]
    elif f.shape[-1:] == (n,):
        lead = f.shape[:-1]
    else:
        raise ValueError(f"image of shape {f.shape} does not match operator with {n} columns")
    return f.reshape(-1, n), lead


def apply(H: SystemMatrix, f: np.ndarray) -> np.ndarray:
    """Forward projection ``Hf``; accepts (side, side), flat, or stacked images."""
    flat, lead = _flat_images(H, f)
    out = (H.matrix @ flat.T).T
    return out.reshape(lead + H.geometry.shape)


def apply_adjoint(H: SystemMatrix, g: np.ndarray) -> np.ndarray:
    """Back projection ``H^T g``; accepts (views, detectors), flat, or stacked sinograms."""
    g = np.asarray(g)
    m = H.shape[0]
    if g.shape[-2:] == H.geometry.shape:
        lead = g.shape[:-2]
    elif g.shape[-1:] == (m,):
        lead = g.shape[:-1]
    else:
        raise ValueError(f"sinogram of shape {g.shape} does not match operator with {m} rows")
    out = (H.matrix.T @ g.reshape(-1, m).T).T
    return out.reshape(lead + H.image_shape)


def dump_coo(H: SystemMatrix, path: str | Path) -> None:
    """Write the matrix as ``row col value`` text lines (debugging aid)."""
    coo = H.matrix.tocoo()
    with open(path, "w") as fh:
        fh.write(f"% {H.shape[0]} {H.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v)!r}\n")
