"""Pillar featurization onto a bird's-eye-view grid, and occupancy entropy.

Each occupied cell gets 12 raw features: log(1 + count), mean z, max z, an
8-bin histogram of z (fractions of the cell's points) and min z.  The learnable
projection of these to C channels lives with the model; :func:`pillarize`
applies a given projection for standalone use.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import EXTENDED_RANGE

N_RAW = 12
N_HIST = 8


@dataclass(frozen=True)
class GridSpec:
    H: int = 128
    W: int = 128
    x_range: tuple[float, float] = (-4.8, 4.8)
    y_range: tuple[float, float] = (-4.8, 4.8)
    z_range: tuple[float, float] = (-1.5, 1.5)

    @classmethod
    def for_class(cls, name: str, H: int = 128, W: int = 128) -> "GridSpec":
        rx, ry, rz = EXTENDED_RANGE[name]
        return cls(H, W, (-rx, rx), (-ry, ry), (-rz, rz))

    @property
    def cell_x(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.H

    @property
    def cell_y(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.W

    @property
    def n_cells(self) -> int:
        return self.H * self.W

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Row from x, column from y; a point on a cell border goes to the lower cell."""
        i = _lower_cell((np.asarray(x) - self.x_range[0]) / self.cell_x, self.H)
        j = _lower_cell((np.asarray(y) - self.y_range[0]) / self.cell_y, self.W)
        return i, j

    def to_cell_coords(self, x: float, y: float) -> tuple[float, float]:
        """Continuous (row, col) with integer values at cell centres."""
        return (x - self.x_range[0]) / self.cell_x - 0.5, (y - self.y_range[0]) / self.cell_y - 0.5

    def from_cell_coords(self, u: float, v: float) -> tuple[float, float]:
        return self.x_range[0] + (u + 0.5) * self.cell_x, self.y_range[0] + (v + 0.5) * self.cell_y


def _lower_cell(scaled, n):
    return np.clip(np.ceil(scaled).astype(np.int64) - 1, 0, n - 1)


@dataclass
class RawPillars:
    spec: GridSpec
    features: np.ndarray  # (H*W, 12), zero rows where unoccupied
    counts: np.ndarray  # (H*W,) int

    @property
    def occupancy(self) -> np.ndarray:
        return self.counts > 0


@dataclass
class BevGrid:
    spec: GridSpec
    features: np.ndarray  # (H, W, C)
    occupancy: np.ndarray  # (H, W) bool

    @property
    def C(self) -> int:
        return self.features.shape[2]


def pillar_features(points, spec: GridSpec) -> RawPillars:
    """Raw per-cell features; bitwise independent of point order.

    Points are sorted by (cell, z, x, y) before any reduction so sums are
    always accumulated in the same order.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    feats = np.zeros((spec.n_cells, N_RAW))
    counts = np.zeros(spec.n_cells, dtype=np.int64)
    if pts.shape[0] == 0:
        return RawPillars(spec, feats, counts)
    i, j = spec.cell_index(pts[:, 0], pts[:, 1])
    cell = i * spec.W + j
    order = np.lexsort((pts[:, 1], pts[:, 0], pts[:, 2], cell))
    cell, z = cell[order], pts[order, 2]
    uniq, start, cnt = np.unique(cell, return_index=True, return_counts=True)
    zsum = np.add.reduceat(z, start)
    zmax = np.maximum.reduceat(z, start)
    zmin = np.minimum.reduceat(z, start)
    z0, z1 = spec.z_range
    b = _lower_cell((z - z0) / ((z1 - z0) / N_HIST), N_HIST)
    hist = np.zeros((uniq.size, N_HIST))
    np.add.at(hist, (np.repeat(np.arange(uniq.size), cnt), b), 1.0)
    counts[uniq] = cnt
    feats[uniq, 0] = np.log1p(cnt)
    feats[uniq, 1] = zsum / cnt
    feats[uniq, 2] = zmax
    feats[uniq, 3 : 3 + N_HIST] = hist / cnt[:, None]
    feats[uniq, 3 + N_HIST] = zmin
    return RawPillars(spec, feats, counts)


def pillarize(points, spec: GridSpec, projection: np.ndarray) -> BevGrid:
    raw = pillar_features(points, spec)
    proj = np.asarray(getattr(projection, "data", projection))
    if proj.shape[0] != N_RAW:
        raise ValueError(f"projection must have {N_RAW} rows, got {proj.shape}")
    feats = (raw.features @ proj).reshape(spec.H, spec.W, -1)
    return BevGrid(spec, feats, raw.occupancy.reshape(spec.H, spec.W))


# ---------------------------------------------------------------------------
# entropy diagnostics


def binary_entropy(p: float) -> float:
    """Entropy in bits of a Bernoulli(p) variable; 0 at p in {0, 1}."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * np.log2(p) - (1 - p) * np.log2(1 - p))


def grid_entropy(p: float, h_fg: float, H: int, W: int) -> float:
    """H*W*(H_b(p) + p*h_fg) bits for occupancy probability p."""
    if h_fg < 0:
        raise ValueError("foreground entropy must be nonnegative")
    return H * W * (binary_entropy(p) + p * h_fg)


def bev_entropy(grid, fg_entropy_per_cell: float) -> float:
    """Entropy of a grid's occupancy pattern; accepts a BevGrid or a boolean mask."""
    occ = np.asarray(grid.occupancy if hasattr(grid, "occupancy") else grid, dtype=bool)
    H, W = occ.shape
    return grid_entropy(float(occ.mean()), fg_entropy_per_cell, H, W)


def feature_entropy(raw: RawPillars, mask=None, bins: int = 16) -> float:
    """Empirical per-cell entropy (bits) of raw features over the selected cells.

    Mean over channels of the entropy of a ``bins``-bin histogram of that
    channel's values.  Used as the default foreground entropy.
    """
    sel = raw.occupancy if mask is None else np.asarray(mask, dtype=bool) & raw.occupancy
    vals = raw.features[sel]
    if vals.shape[0] < 2:
        return 0.0
    ent = []
    for c in range(vals.shape[1]):
        hist, _ = np.histogram(vals[:, c], bins=bins)
        p = hist[hist > 0] / vals.shape[0]
        ent.append(float(-(p * np.log2(p)).sum()))
    return float(np.mean(ent))


# ---------------------------------------------------------------------------
# debugging dumps


def dump_grid(path, grid: BevGrid) -> None:
    H, W, C = grid.features.shape
    Path(path).write_bytes(f"{H} {W} {C}\n".encode() + grid.features.astype("<f4").tobytes())


def read_grid_dump(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    head, _, body = blob.partition(b"\n")
    H, W, C = (int(v) for v in head.split())
    return np.frombuffer(body, dtype="<f4").reshape(H, W, C)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of values in [0, 1] (scaled by 255 and rounded)."""
    img = np.clip(np.rint(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    W, H = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W)
