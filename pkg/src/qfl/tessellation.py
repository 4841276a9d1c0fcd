"""Grid tessellation of a slide mask into fixed-size tiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TessellationSpec:
    mask: np.ndarray
    exclusion: np.ndarray
    tile_size: int
    coverage_threshold: float = 0.05

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.exclusion = np.asarray(self.exclusion, dtype=bool)
        if self.mask.shape != self.exclusion.shape or self.mask.ndim != 2:
            raise ValueError("tissue mask and exclusion mask must be 2-D with equal extents")
        if not 0 < self.coverage_threshold <= 1:
            raise ValueError("coverage_threshold must lie in (0, 1]")
        if self.tile_size < 1:
            raise ValueError("tile_size must be positive")


def tessellate(spec: TessellationSpec) -> list[tuple[int, int]]:
    """Top-left (row, col) of every kept tile, in row-major order.

    The grid is anchored at the origin and partial tiles at the right and
    bottom edges are dropped. A tile is kept when its tissue fraction is at
    least the threshold and it contains no excluded pixel.
    """
    ts = spec.tile_size
    rows, cols = spec.mask.shape[0] // ts, spec.mask.shape[1] // ts
    if rows == 0 or cols == 0:
        return []
    crop = (slice(0, rows * ts), slice(0, cols * ts))
    tissue = spec.mask[crop].reshape(rows, ts, cols, ts).sum(axis=(1, 3))
    marked = spec.exclusion[crop].reshape(rows, ts, cols, ts).any(axis=(1, 3))
    keep = (tissue / (ts * ts) >= spec.coverage_threshold) & ~marked
    return [(int(r) * ts, int(c) * ts) for r, c in zip(*np.nonzero(keep))]


def synthetic_slide(rng: np.random.Generator, size: int = 64, pen_probability: float = 0.25):
    """A random elliptical tissue section and, sometimes, a pen stroke."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
    ry, rx = rng.uniform(0.15 * size, 0.4 * size, size=2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    tissue = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    pen = np.zeros_like(tissue)
    if rng.random() < pen_probability:
        width = max(1, size // 20)
        start = int(rng.integers(0, size - width))
        lo, hi = sorted(rng.integers(0, size, size=2))
        if rng.random() < 0.5:
            pen[start:start + width, lo:hi + 1] = True
        else:
            pen[lo:hi + 1, start:start + width] = True
    return tissue, pen
