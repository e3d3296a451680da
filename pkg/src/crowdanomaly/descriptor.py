"""Polar shape histograms of the trajectories that start in each patch.

The first frame of a clip is cut into a grid of equal, non-overlapping
patches; pixels to the right of and below the last full patch are ignored.
Each trajectory starting in a patch is translated so that its first point is
the origin, and its remaining ``T - 1`` points are counted in a
``n_mag x n_ang`` polar grid with uniform magnitude rings (the outermost one
absorbs everything beyond ``r_max``) and uniform angular sectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_trajectories, check_clip_geometry
from .exceptions import GeometryMismatch, InvalidPatchSize
from .trajectory import TrajectorySet

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PatchGrid:
    width: int
    height: int
    patch_w: int
    patch_h: int

    def __post_init__(self):
        if not (1 <= self.patch_w <= self.width and 1 <= self.patch_h <= self.height):
            raise InvalidPatchSize(
                f"patch {self.patch_w}x{self.patch_h} does not fit frame {self.width}x{self.height}"
            )

    @property
    def cols(self) -> int:
        return self.width // self.patch_w

    @property
    def rows(self) -> int:
        return self.height // self.patch_h

    @property
    def M(self) -> int:
        return self.cols * self.rows

    def location(self, row: int, col: int) -> int:
        return row * self.cols + col

    def bounds(self, m: int) -> tuple[slice, slice]:
        """Pixel ``(y, x)`` slices covered by patch ``m``."""
        row, col = divmod(m, self.cols)
        return (slice(row * self.patch_h, (row + 1) * self.patch_h),
                slice(col * self.patch_w, (col + 1) * self.patch_w))

    def rasterize(self, cells: np.ndarray) -> np.ndarray:
        """Expand a ``(rows, cols)`` cell array to a full-frame pixel array."""
        cells = np.asarray(cells).reshape(self.rows, self.cols)
        out = np.zeros((self.height, self.width), dtype=cells.dtype)
        out[: self.rows * self.patch_h, : self.cols * self.patch_w] = np.kron(
            cells, np.ones((self.patch_h, self.patch_w), dtype=cells.dtype)
        )
        return out


def build_grid(W: int, H: int, patch_w: int, patch_h: int) -> PatchGrid:
    return PatchGrid(W, H, patch_w, patch_h)


@dataclass(frozen=True)
class DescriptorParams:
    n_mag: int = 8
    n_ang: int = 8
    r_max: float = 9.0

    def __post_init__(self):
        if self.n_mag < 1 or self.n_ang < 1:
            raise ValueError("bin counts must be >= 1")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")

    @property
    def N(self) -> int:
        return self.n_mag * self.n_ang

    @classmethod
    def for_clip_length(cls, T: int, n_mag: int = 8, n_ang: int = 8, r_max: float | None = None):
        """Default ``r_max`` is ``T - 1``, the reach of a 1 px/frame particle."""
        return cls(n_mag, n_ang, float(T - 1) if r_max is None else float(r_max))


@dataclass(frozen=True, eq=False)
class ShapeHistogram:
    n_mag: int
    n_ang: int
    r_max: float
    counts: np.ndarray = field(repr=False)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.counts, dtype=dtype)

    @property
    def N(self) -> int:
        return self.n_mag * self.n_ang


@dataclass(frozen=True, eq=False)
class SplitHistograms:
    mag: np.ndarray
    ang: np.ndarray


def bin_indices(dx, dy, n_mag: int, n_ang: int, r_max: float) -> np.ndarray:
    """Vectorised polar bin index ``mag_bin * n_ang + ang_bin``."""
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    r = np.hypot(dx, dy)
    mag = np.minimum(np.floor(r * (n_mag / r_max)), n_mag - 1).astype(np.int64)
    theta = np.arctan2(dy, dx)
    theta = np.where(theta < 0.0, theta + TWO_PI, theta)
    ang = np.minimum(np.floor(theta * (n_ang / TWO_PI)), n_ang - 1).astype(np.int64)
    ang = np.where(r == 0.0, 0, ang)
    return mag * n_ang + ang


def bin_of(point, n_mag: int, n_ang: int, r_max: float) -> int:
    dx, dy = point
    return int(bin_indices(dx, dy, n_mag, n_ang, r_max))


def _translated(traj: TrajectorySet, ys: slice, xs: slice):
    x = traj.x[:, ys, xs].astype(np.int64)
    y = traj.y[:, ys, xs].astype(np.int64)
    return x[1:] - x[0], y[1:] - y[0]


def describe_patch(traj: TrajectorySet, grid: PatchGrid, m: int,
                   params: DescriptorParams) -> ShapeHistogram:
    """Histogram of the trajectories starting in patch ``m``."""
    if not 0 <= m < grid.M:
        raise IndexError(f"patch {m} outside grid of {grid.M}")
    ys, xs = grid.bounds(m)
    dx, dy = _translated(traj, ys, xs)
    idx = bin_indices(dx, dy, params.n_mag, params.n_ang, params.r_max)
    counts = np.bincount(idx.ravel(), minlength=params.N)
    return ShapeHistogram(params.n_mag, params.n_ang, params.r_max, counts)


def describe_clip(traj: TrajectorySet, grid: PatchGrid, params: DescriptorParams):
    """Histograms for every patch of the grid at once.

    Returns
    -------
    counts : ndarray of shape (M, N), int64
    moving : ndarray of shape (M,), int64
        Number of histogrammed points displaced from the origin.
    """
    if (traj.width, traj.height) != (grid.width, grid.height):
        raise GeometryMismatch(
            f"trajectories are {traj.width}x{traj.height}, grid expects {grid.width}x{grid.height}"
        )
    ys = slice(0, grid.rows * grid.patch_h)
    xs = slice(0, grid.cols * grid.patch_w)
    dx, dy = _translated(traj, ys, xs)
    idx = bin_indices(dx, dy, params.n_mag, params.n_ang, params.r_max)
    hh, ww = np.indices((grid.rows * grid.patch_h, grid.cols * grid.patch_w))
    cell = (hh // grid.patch_h) * grid.cols + ww // grid.patch_w
    flat = cell[None] * params.N + idx
    counts = np.bincount(flat.ravel(), minlength=grid.M * params.N).reshape(grid.M, params.N)
    displaced = ((dx != 0) | (dy != 0)).astype(np.int64)
    moving = np.bincount(np.broadcast_to(cell, dx.shape).ravel(), weights=displaced.ravel(),
                         minlength=grid.M).astype(np.int64)
    return counts, moving


def split(hist: ShapeHistogram) -> SplitHistograms:
    grid = np.asarray(hist.counts).reshape(hist.n_mag, hist.n_ang)
    return SplitHistograms(grid.sum(axis=1), grid.sum(axis=0))


class TrajectoryShapeDescriptor(TransformerMixin, BaseEstimator):
    """Turn clips into per-patch shape histograms.

    ``X`` is a sequence of clips, each either a :class:`TrajectorySet` or a
    sequence of :class:`~crowdanomaly.flow_io.FlowField` (advected on the
    fly).  ``transform`` returns an ``(n_clips, M, N)`` integer array.
    """

    def __init__(self, patch_w=3, patch_h=3, n_mag_bins=8, n_ang_bins=8, r_max=None):
        self.patch_w = patch_w
        self.patch_h = patch_h
        self.n_mag_bins = n_mag_bins
        self.n_ang_bins = n_ang_bins
        self.r_max = r_max

    def fit(self, X, y=None):
        first = next(iter(as_trajectories(X)))
        self.grid_ = build_grid(first.width, first.height, self.patch_w, self.patch_h)
        self.params_ = DescriptorParams.for_clip_length(
            first.T, self.n_mag_bins, self.n_ang_bins, self.r_max
        )
        self.clip_length_ = first.T
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        out = []
        for traj in as_trajectories(X):
            check_clip_geometry(traj, self.grid_, self.clip_length_)
            out.append(describe_clip(traj, self.grid_, self.params_)[0])
        return np.stack(out)
