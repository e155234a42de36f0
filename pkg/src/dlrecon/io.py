"""Raw float32 arrays with JSON sidecars, and 8-bit PGM previews."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_raw(path: str | Path, array: np.ndarray, meta: dict) -> None:
    """Flat little-endian float32 payload at ``path``; ``meta`` plus the shape go to ``path.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar_path(path).write_text(json.dumps({**meta, "shape": list(arr.shape), "dtype": "float32-le"},
                                             indent=2, sort_keys=True))


def read_raw(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload has {data.size} values, sidecar says {shape}")
    return data.reshape(shape).astype(np.float64), meta


def write_image(path: str | Path, image: np.ndarray, **meta) -> None:
    image = np.asarray(image)
    write_raw(path, image, {"side": int(image.shape[-1]), **meta})


def write_sinogram(path: str | Path, sinogram: np.ndarray, geometry, **meta) -> None:
    sinogram = np.asarray(sinogram)
    write_raw(path, sinogram, {"num_views": geometry.num_views, "num_detectors": geometry.num_detectors,
                               "geometry": geometry.to_dict(), **meta})


def write_pgm(path: str | Path, image: np.ndarray, vmin: float | None = None,
              vmax: float | None = None) -> None:
    """Binary 8-bit PGM, min-max scaled; row 0 of the array is written last (y up)."""
    image = np.asarray(image, dtype=np.float64)
    lo = image.min() if vmin is None else vmin
    hi = image.max() if vmax is None else vmax
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    pix = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)[::-1]
    h, w = pix.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())
