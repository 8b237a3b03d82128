"""Random polygon copy-masks and the "grounded fake" composites built from them.

All polygon geometry is in normalized image coordinates: x runs along the
width, y along the height, both in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import composite

CENTER_RANGE = (0.1, 0.9)
VERTEX_COUNTS = (4, 5, 6)
RADIUS_RANGE = (0.1, 0.5)


@dataclass(frozen=True)
class PolygonSpec:
    center: tuple[float, float]  # (x, y)
    vertices: tuple[tuple[float, float], ...]  # (radius, angle) around center

    def points(self) -> np.ndarray:
        """Cartesian vertices ordered by angle, shape (v, 2) as (x, y)."""
        cx, cy = self.center
        polar = sorted(self.vertices, key=lambda rv: rv[1])
        return np.array([(cx + r * math.cos(a), cy + r * math.sin(a)) for r, a in polar])


def sample_polygon(rng_seed) -> PolygonSpec:
    rng = np.random.default_rng(rng_seed)
    return _sample_polygon(rng)


def _sample_polygon(rng: np.random.Generator) -> PolygonSpec:
    cx, cy = rng.uniform(*CENTER_RANGE, size=2)
    v = int(rng.integers(VERTEX_COUNTS[0], VERTEX_COUNTS[-1] + 1))
    radii = rng.uniform(*RADIUS_RANGE, size=v)
    angles = rng.uniform(0.0, 2 * math.pi, size=v)
    return PolygonSpec(center=(float(cx), float(cy)), vertices=tuple(zip(radii.tolist(), angles.tolist())))


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule containment test for arrays of query points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_at)
    return inside


def rasterize_polygon(spec: PolygonSpec, height: int, width: int) -> np.ndarray:
    """Binary (H, W) mask: 1 where the pixel centre falls inside the polygon.

    Only pixel centres inside the image are tested, so parts of the polygon
    outside [0, 1]^2 are clipped away implicitly.
    """
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    px, py = np.meshgrid(xs, ys)
    return points_in_polygon(px, py, spec.points()).astype(np.float64)


def make_grounded_fake(source: np.ndarray, destination: np.ndarray, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    h, w = source.shape[:2]
    mask = rasterize_polygon(sample_polygon(rng_seed), h, w)
    return composite(source, destination, mask), mask


def sample_polygon_masks(rng: np.random.Generator, n: int, height: int, width: int) -> np.ndarray:
    """``n`` independent polygon masks, shape (n, H, W)."""
    return np.stack([rasterize_polygon(_sample_polygon(rng), height, width) for _ in range(n)])
