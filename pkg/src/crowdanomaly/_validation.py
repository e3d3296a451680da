"""Input coercion and checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import BinCountMismatch, GeometryMismatch
from .flow_io import FlowField
from .trajectory import Clip, TrajectorySet, advect


def as_trajectories(X):
    """Yield a :class:`TrajectorySet` for each clip in ``X``.

    Clips may be given as trajectory sets, :class:`Clip` objects, sequences of
    :class:`FlowField`, or arrays of shape ``(T-1, H, W, 2)``.
    """
    if isinstance(X, (TrajectorySet, Clip)):
        X = [X]
    for clip in X:
        if isinstance(clip, TrajectorySet):
            yield clip
        elif isinstance(clip, Clip):
            yield advect(clip)
        elif isinstance(clip, np.ndarray):
            if clip.ndim != 4 or clip.shape[-1] != 2:
                raise ValueError(f"flow arrays must have shape (T-1, H, W, 2), got {clip.shape}")
            yield advect([FlowField(f[..., 0], f[..., 1]) for f in clip])
        else:
            yield advect(list(clip))


def check_clip_geometry(traj: TrajectorySet, grid, T: int) -> None:
    if (traj.width, traj.height) != (grid.width, grid.height):
        raise GeometryMismatch(
            f"clip is {traj.width}x{traj.height}, model expects {grid.width}x{grid.height}"
        )
    if traj.T != T:
        raise GeometryMismatch(f"clip has T={traj.T}, model expects T={T}")


def check_histograms(*arrays) -> list[np.ndarray]:
    """Coerce histogram-like inputs to integer arrays sharing the bin count."""
    out = []
    for a in arrays:
        a = np.asarray(a)
        if a.dtype.kind == "f":
            if not np.all(np.isfinite(a)) or np.any(a != np.round(a)):
                raise ValueError("histogram counts must be integers")
            a = a.astype(np.int64)
        elif a.dtype.kind not in "iu":
            raise ValueError(f"histogram counts must be integers, got dtype {a.dtype}")
        if np.any(a < 0):
            raise ValueError("histogram counts must be non-negative")
        out.append(a.astype(np.int64, copy=False))
    n = {a.shape[-1] for a in out}
    if len(n) > 1:
        raise BinCountMismatch(f"histograms have differing bin counts {sorted(n)}")
    return out
