"""Random ellipse phantoms, their rasterization and exact parallel-beam sinograms.

Object coordinates live in the square [-1, 1]^2.  An image of side ``n`` has
pixel (i, j) centred at ``x = -1 + (j + 0.5) * 2/n``, ``y = -1 + (i + 0.5) * 2/n``
(row index grows with y).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .projector import ScanGeometry

# boundary samples used for the "minor inside main" containment test
_CONTAINMENT_SAMPLES = 72


class PhantomGenerationError(RuntimeError):
    """Rejection sampling could not place an ellipse inside its bounds."""


@dataclass(frozen=True)
class Ellipse:
    center_x: float
    center_y: float
    semi_axis_a: float
    semi_axis_b: float
    rotation: float
    amplitude: float

    def __post_init__(self):
        if not (self.semi_axis_a > 0 and self.semi_axis_b > 0):
            raise ValueError("ellipse semi-axes must be positive")

    def half_extent(self) -> tuple[float, float]:
        """Half width and half height of the axis-aligned bounding box."""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        a2, b2 = self.semi_axis_a**2, self.semi_axis_b**2
        return float(np.sqrt(a2 * c * c + b2 * s * s)), float(np.sqrt(a2 * s * s + b2 * c * c))

    def in_unit_square(self) -> bool:
        hx, hy = self.half_extent()
        return (abs(self.center_x) + hx <= 1.0) and (abs(self.center_y) + hy <= 1.0)

    def contains(self, x, y):
        """Boolean mask of points (x, y) lying inside or on the ellipse."""
        dx = np.asarray(x) - self.center_x
        dy = np.asarray(y) - self.center_y
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        u = (dx * c + dy * s) / self.semi_axis_a
        v = (-dx * s + dy * c) / self.semi_axis_b
        return u * u + v * v <= 1.0

    def boundary(self, num: int = _CONTAINMENT_SAMPLES) -> tuple[np.ndarray, np.ndarray]:
        t = np.linspace(0.0, 2 * np.pi, num, endpoint=False)
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        ex, ey = self.semi_axis_a * np.cos(t), self.semi_axis_b * np.sin(t)
        return self.center_x + ex * c - ey * s, self.center_y + ex * s + ey * c

    def as_tuple(self) -> tuple[float, ...]:
        return (self.center_x, self.center_y, self.semi_axis_a, self.semi_axis_b,
                self.rotation, self.amplitude)


@dataclass(frozen=True)
class EllipsePhantom:
    ellipses: tuple[Ellipse, ...]
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "ellipses", tuple(self.ellipses))

    def validate(self, min_minor: int = 2, max_minor: int = 7) -> None:
        """Check the generated-phantom invariants; raises ``ValueError``."""
        if not self.ellipses:
            raise ValueError("phantom has no main ellipse")
        k = len(self.ellipses) - 1
        if not min_minor <= k <= max_minor:
            raise ValueError(f"phantom has {k} minor ellipses, expected {min_minor}..{max_minor}")
        main = self.ellipses[0]
        for e in self.ellipses:
            if not e.in_unit_square():
                raise ValueError("ellipse bounding box leaves the unit square")
        for e in self.ellipses[1:]:
            if not main.contains(e.center_x, e.center_y):
                raise ValueError("minor ellipse centre lies outside the main ellipse")

    def to_record(self) -> dict:
        return {"seed": self.seed, "ellipses": [list(e.as_tuple()) for e in self.ellipses]}

    @classmethod
    def from_record(cls, record: dict) -> "EllipsePhantom":
        return cls(tuple(Ellipse(*map(float, row)) for row in record["ellipses"]), record.get("seed"))


@dataclass(frozen=True)
class PhantomConfig:
    """Sampling ranges (inclusive min, max) for random phantoms."""

    main_center: tuple[float, float] = (-0.15, 0.15)
    main_axes: tuple[float, float] = (0.5, 0.8)
    main_amplitude: tuple[float, float] = (0.8, 1.0)
    minor_count: tuple[int, int] = (2, 7)
    minor_axes: tuple[float, float] = (0.05, 0.25)
    minor_amplitude_magnitude: tuple[float, float] = (0.05, 0.4)
    rotation: tuple[float, float] = (0.0, float(np.pi))
    max_attempts: int = 10_000

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "max_attempts":
                continue
            lo, hi = value
            if lo > hi:
                raise ValueError(f"degenerate phantom range {name}: {lo} > {hi}")
        if self.minor_count[0] < 0 or self.main_axes[0] <= 0 or self.minor_axes[0] <= 0:
            raise ValueError("phantom axes must be positive and minor count non-negative")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def generate_phantom(seed: int, config: PhantomConfig | None = None) -> EllipsePhantom:
    """Draw one main ellipse plus a random number of minor ellipses.

    Minor ellipses are rejection-sampled until they lie entirely inside the
    main ellipse; ``PhantomGenerationError`` is raised once
    ``config.max_attempts`` draws are exhausted for any single ellipse.
    """
    config = config or PhantomConfig()
    rng = np.random.default_rng(seed)
    u = rng.uniform

    main = None
    for _ in range(config.max_attempts):
        cand = Ellipse(
            u(*config.main_center), u(*config.main_center),
            u(*config.main_axes), u(*config.main_axes),
            u(*config.rotation), u(*config.main_amplitude),
        )
        if cand.in_unit_square():
            main = cand
            break
    if main is None:
        raise PhantomGenerationError("could not place the main ellipse inside the unit square")

    k = int(rng.integers(config.minor_count[0], config.minor_count[1], endpoint=True))
    ellipses = [main]
    for _ in range(k):
        ellipses.append(_draw_minor(rng, main, config))
    return EllipsePhantom(tuple(ellipses), seed)


def _draw_minor(rng: np.random.Generator, main: Ellipse, config: PhantomConfig) -> Ellipse:
    u = rng.uniform
    hx, hy = main.half_extent()
    for _ in range(config.max_attempts):
        cx = u(main.center_x - hx, main.center_x + hx)
        cy = u(main.center_y - hy, main.center_y + hy)
        a, b = u(*config.minor_axes), u(*config.minor_axes)
        rot = u(*config.rotation)
        amp = u(*config.minor_amplitude_magnitude) * (1.0 if rng.random() < 0.5 else -1.0)
        if not main.contains(cx, cy):
            continue
        cand = Ellipse(cx, cy, a, b, rot, amp)
        if cand.in_unit_square() and np.all(main.contains(*cand.boundary())):
            return cand
    raise PhantomGenerationError(
        f"no minor ellipse fits inside the main ellipse after {config.max_attempts} attempts")


def pixel_centers(side: int) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate grids (x, y) of pixel centres, each of shape (side, side)."""
    c = -1.0 + (np.arange(side) + 0.5) * (2.0 / side)
    y, x = np.meshgrid(c, c, indexing="ij")
    return x, y


def rasterize(phantom: EllipsePhantom, side: int) -> np.ndarray:
    """Point-sample the phantom at pixel centres (no anti-aliasing)."""
    if side < 2:
        raise ValueError("image side must be >= 2")
    x, y = pixel_centers(side)
    image = np.zeros((side, side))
    for e in phantom.ellipses:
        image[e.contains(x, y)] += e.amplitude
    return image


def ellipse_projection(e: Ellipse, theta: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Line integrals of one ellipse along rays ``x cos(theta) + y sin(theta) = s``.

    ``theta`` (radians) and ``s`` broadcast against each other.
    """
    s0 = e.center_x * np.cos(theta) + e.center_y * np.sin(theta)
    psi = theta - e.rotation
    w2 = (e.semi_axis_a * np.cos(psi)) ** 2 + (e.semi_axis_b * np.sin(psi)) ** 2
    t = s - s0
    chord = np.sqrt(np.maximum(w2 - t * t, 0.0))
    return e.amplitude * 2.0 * e.semi_axis_a * e.semi_axis_b / w2 * chord


def analytic_sinogram(phantom: EllipsePhantom, geometry: ScanGeometry) -> np.ndarray:
    """Exact sinogram, shape (num_views, num_detectors)."""
    theta = np.deg2rad(geometry.angles)[:, None]
    s = geometry.detector_positions[None, :]
    sino = np.zeros((geometry.num_views, geometry.num_detectors))
    for e in phantom.ellipses:
        sino += ellipse_projection(e, theta, s)
    return sino


def write_phantoms(path: str | Path, phantoms: Iterable[EllipsePhantom]) -> None:
    with open(path, "w") as fh:
        for p in phantoms:
            fh.write(json.dumps(p.to_record()) + "\n")


def read_phantoms(path: str | Path) -> list[EllipsePhantom]:
    with open(path) as fh:
        return [EllipsePhantom.from_record(json.loads(line)) for line in fh if line.strip()]
