"""Dense SVD of the system matrix, Moore-Penrose pseudoinverse, and range/null projectors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .projector import SystemMatrix

MAX_DENSE_COLUMNS = 16384


class SvdError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpaceProjectors:
    """Orthogonal projectors onto the measurable subspace (row space of H) and its complement."""

    right_vectors: np.ndarray  # n x r, orthonormal columns

    def project_measurable(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        flat = f.reshape(-1, self.right_vectors.shape[0])
        out = (flat @ self.right_vectors) @ self.right_vectors.T
        return out.reshape(f.shape)

    def project_null(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return f - self.project_measurable(f)


@dataclass(frozen=True)
class SvdFactors:
    left_vectors: np.ndarray    # m x r
    singular_values: np.ndarray  # r, descending, > 0
    right_vectors: np.ndarray   # n x r
    image_shape: tuple[int, ...] | None = None
    data_shape: tuple[int, ...] | None = None

    @property
    def rank(self) -> int:
        return self.singular_values.size

    @property
    def projectors(self) -> SpaceProjectors:
        return SpaceProjectors(self.right_vectors)

    def pseudoinverse(self) -> np.ndarray:
        """Dense H^+ (n x m)."""
        return (self.right_vectors / self.singular_values) @ self.left_vectors.T

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def svd(H: SystemMatrix | np.ndarray, truncation_tol: float = 1e-10,
        max_columns: int = MAX_DENSE_COLUMNS) -> SvdFactors:
    """Thin SVD with singular values below ``truncation_tol * sigma_max`` dropped."""
    if isinstance(H, SystemMatrix):
        dense = H.toarray()
        image_shape, data_shape = H.image_shape, H.geometry.shape
    else:
        dense = np.asarray(H, dtype=float)
        image_shape = data_shape = None
    if dense.ndim != 2:
        raise ValueError("svd expects a 2-D operator")
    if dense.shape[1] > max_columns:
        raise ValueError(f"{dense.shape[1]} columns exceeds the dense SVD limit of {max_columns}")
    try:
        u, s, vt = np.linalg.svd(dense, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"SVD did not converge: {exc}") from exc
    if s.size == 0 or s[0] == 0.0:
        r = 0
    else:
        r = int(np.count_nonzero(s > truncation_tol * s[0]))
    return SvdFactors(np.ascontiguousarray(u[:, :r]), s[:r].copy(),
                      np.ascontiguousarray(vt[:r].T), image_shape, data_shape)


def pseudoinverse_apply(factors: SvdFactors, g: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution ``V diag(1/s) U^T g``."""
    g = np.asarray(g, dtype=float)
    m = factors.left_vectors.shape[0]
    if factors.data_shape is not None and g.shape[-2:] == factors.data_shape:
        lead = g.shape[:-2]
    elif g.shape[-1:] == (m,):
        lead = g.shape[:-1]
    else:
        raise ValueError(f"data of shape {g.shape} does not match operator with {m} rows")
    flat = g.reshape(-1, m)
    out = ((flat @ factors.left_vectors) / factors.singular_values) @ factors.right_vectors.T
    if factors.image_shape is not None:
        return out.reshape(lead + factors.image_shape)
    return out.reshape(lead + (factors.right_vectors.shape[0],))


def project_measurable(factors: SvdFactors, f: np.ndarray) -> np.ndarray:
    return factors.projectors.project_measurable(f)


def project_null(factors: SvdFactors, f: np.ndarray) -> np.ndarray:
    return factors.projectors.project_null(f)


def cache_key(H: SystemMatrix, truncation_tol: float) -> str:
    payload = json.dumps({"geometry": H.geometry.to_dict(), "side": H.side,
                          "scale": H.scale, "tol": truncation_tol}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def cached_svd(H: SystemMatrix, cache_dir: str | Path | None, truncation_tol: float = 1e-10) -> SvdFactors:
    """``svd`` backed by an on-disk cache of float64 factor arrays plus a JSON manifest."""
    if cache_dir is None:
        return svd(H, truncation_tol)
    cache_dir = Path(cache_dir)
    key = cache_key(H, truncation_tol)
    manifest = cache_dir / f"svd_{key}.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        arrays = {}
        for name in ("left_vectors", "singular_values", "right_vectors"):
            shape = tuple(meta["shapes"][name])
            arrays[name] = np.fromfile(cache_dir / f"svd_{key}_{name}.bin", dtype="<f8").reshape(shape)
        return SvdFactors(**arrays, image_shape=H.image_shape, data_shape=H.geometry.shape)
    factors = svd(H, truncation_tol)
    cache_dir.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name in ("left_vectors", "singular_values", "right_vectors"):
        arr = getattr(factors, name)
        arr.astype("<f8").tofile(cache_dir / f"svd_{key}_{name}.bin")
        shapes[name] = list(arr.shape)
    manifest.write_text(json.dumps({"key": key, "geometry": H.geometry.to_dict(), "side": H.side,
                                    "truncation_tol": truncation_tol, "shapes": shapes}, indent=2))
    return factors
