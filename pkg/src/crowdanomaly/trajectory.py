"""Short-term particle trajectories.

A video is cut into non-overlapping clips of ``T`` frames.  Inside a clip one
particle is seeded on every pixel of the first frame and carried along the
clip's ``T - 1`` flow fields, moving by the rounded flow found at its current
integer position.  Positions are clamped to the frame, so every trajectory
has exactly ``T`` points.

Coordinates are 0-based: ``x`` in ``[0, W)``, ``y`` in ``[0, H)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import DimensionMismatch
from .flow_io import DEFAULT_CLAMP, FlowField


def segment_clips(frame_count: int, T: int) -> list[range]:
    """Consecutive disjoint frame ranges of length ``T``; a short tail is dropped."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    return [range(start, start + T) for start in range(0, frame_count - T + 1, T)]


def round_half_away(a: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties away from zero."""
    a = np.asarray(a, dtype=np.float64)
    return np.copysign(np.floor(np.abs(a) + 0.5), a)


@dataclass(frozen=True)
class Clip:
    """``T - 1`` flow fields covering ``T`` consecutive frames."""

    flows: Sequence[FlowField]
    start_frame_index: int = 0

    def __post_init__(self):
        if len(self.flows) < 1:
            raise ValueError("a clip needs at least one flow field (T >= 2)")
        shape = self.flows[0].shape
        for f in self.flows:
            if f.shape != shape:
                raise DimensionMismatch(f"flow shapes differ within clip: {f.shape} vs {shape}")

    @property
    def T(self) -> int:
        return len(self.flows) + 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.flows[0].shape


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Particle positions for every start pixel of a clip.

    ``x[t, h, w]`` and ``y[t, h, w]`` are the position at step ``t`` of the
    particle that started on pixel ``(w, h)``.
    """

    x: np.ndarray
    y: np.ndarray

    @property
    def T(self) -> int:
        return self.x.shape[0]

    @property
    def height(self) -> int:
        return self.x.shape[1]

    @property
    def width(self) -> int:
        return self.x.shape[2]

    def trajectory(self, w: int, h: int) -> list[tuple[int, int]]:
        return list(zip(self.x[:, h, w].tolist(), self.y[:, h, w].tolist()))


def advect(clip: Clip | Sequence[FlowField], width: int | None = None, height: int | None = None,
           clamp: float = DEFAULT_CLAMP) -> TrajectorySet:
    """Carry one particle per pixel through the clip's flow fields.

    ``width``/``height`` optionally declare the expected frame size; a
    mismatch with the flows raises :class:`DimensionMismatch`.  Flow values
    are clamped to ``+/- clamp`` before rounding.
    """
    if not isinstance(clip, Clip):
        clip = Clip(list(clip))
    H, W = clip.shape
    if (width is not None and width != W) or (height is not None and height != H):
        raise DimensionMismatch(f"flows are {W}x{H}, expected {width}x{height}")
    T = clip.T
    xs = np.empty((T, H, W), dtype=np.int32)
    ys = np.empty((T, H, W), dtype=np.int32)
    ys[0], xs[0] = np.indices((H, W), dtype=np.int32)
    for t, flow in enumerate(clip.flows):
        du = round_half_away(np.clip(flow.u, -clamp, clamp)).astype(np.int32)
        dv = round_half_away(np.clip(flow.v, -clamp, clamp)).astype(np.int32)
        x, y = xs[t], ys[t]
        np.clip(x + du[y, x], 0, W - 1, out=xs[t + 1])
        np.clip(y + dv[y, x], 0, H - 1, out=ys[t + 1])
    return TrajectorySet(xs, ys)
