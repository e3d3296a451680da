"""Flow-field and frame I/O, plus a baseline Horn-Schunck estimator.

Flow files use the Middlebury ``.flo`` layout: the float32 magic 202021.25,
int32 width, int32 height, then interleaved float32 ``(u, v)`` pairs in
row-major order, all little-endian.  Frames are binary PGM (``P5``) with
maxval 255.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .exceptions import (
    BadHeader,
    BadMagic,
    DimensionMismatch,
    IoFailure,
    NonFinite,
    Truncated,
)

FLO_MAGIC = 202021.25
FLO_HEADER_BYTES = 12
DEFAULT_CLAMP = 32.0


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense motion vectors between two consecutive frames.

    ``u`` and ``v`` are ``(height, width)`` float64 arrays holding the
    horizontal and vertical velocity in pixels per frame.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise DimensionMismatch(f"u {u.shape} and v {v.shape} must be equal 2-D shapes")
        if u.shape[0] < 1 or u.shape[1] < 1:
            raise DimensionMismatch("flow field must be at least 1x1")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise NonFinite("flow field contains NaN or Inf")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def clamped(self, limit: float = DEFAULT_CLAMP) -> "FlowField":
        return FlowField(np.clip(self.u, -limit, limit), np.clip(self.v, -limit, limit))

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return np.array_equal(self.u, other.u) and np.array_equal(self.v, other.v)


def read_flo(path) -> FlowField:
    """Read a Middlebury ``.flo`` file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    if len(raw) < FLO_HEADER_BYTES:
        if len(raw) >= 4 and np.frombuffer(raw[:4], "<f4")[0] != np.float32(FLO_MAGIC):
            raise BadMagic(f"{path}: not a .flo file")
        raise Truncated(f"{path}: {len(raw)} bytes is shorter than the header")
    magic = np.frombuffer(raw[:4], "<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise BadMagic(f"{path}: magic {magic!r} != {FLO_MAGIC}")
    width, height = (int(x) for x in np.frombuffer(raw[4:12], "<i4"))
    if width < 1 or height < 1:
        raise BadHeader(f"{path}: invalid dimensions {width}x{height}")
    expected = FLO_HEADER_BYTES + 8 * width * height
    if len(raw) != expected:
        raise Truncated(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, "<f4", offset=FLO_HEADER_BYTES).reshape(height, width, 2)
    if not np.isfinite(data).all():
        raise NonFinite(f"{path}: flow contains NaN or Inf")
    return FlowField(data[..., 0].astype(np.float64), data[..., 1].astype(np.float64))


def flo_bytes(field: FlowField) -> bytes:
    header = np.array([FLO_MAGIC], "<f4").tobytes()
    header += np.array([field.width, field.height], "<i4").tobytes()
    payload = np.empty((field.height, field.width, 2), "<f4")
    payload[..., 0] = field.u
    payload[..., 1] = field.v
    return header + payload.tobytes()


def write_flo(field: FlowField, path) -> None:
    """Write ``field`` as a ``.flo`` file.

    Values are stored as float32, so only float32-representable fields
    round-trip exactly.
    """
    data = flo_bytes(field)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def _pgm_tokens(raw: bytes, count: int):
    """Return the first ``count`` header tokens and the offset after them."""
    tokens = []
    pos = 0
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise BadHeader("incomplete PGM header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not raw[pos : pos + 1].isspace():
        raise BadHeader("missing whitespace after PGM header")
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval 255) as a ``(height, width)`` uint8 array."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    if raw[:2] != b"P5":
        raise BadHeader(f"{path}: only binary P5 PGM is supported, got {raw[:2]!r}")
    try:
        tokens, offset = _pgm_tokens(raw[2:], 3)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise BadHeader(f"{path}: {exc}") from exc
    if width < 1 or height < 1:
        raise BadHeader(f"{path}: invalid dimensions {width}x{height}")
    if maxval != 255:
        raise BadHeader(f"{path}: maxval {maxval} unsupported (need 255)")
    offset += 2
    payload = raw[offset : offset + width * height]
    if len(payload) < width * height:
        raise Truncated(f"{path}: raster has {len(payload)} of {width * height} bytes")
    return np.frombuffer(payload, np.uint8).reshape(height, width).copy()


def pgm_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionMismatch("PGM images must be 2-D")
    height, width = image.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + image.astype(np.uint8).tobytes()


def write_pgm(image: np.ndarray, path) -> None:
    data = pgm_bytes(image)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class FlowEstimatorConfig:
    iterations: int = 100
    alpha: float = 15.0
    clamp: float = DEFAULT_CLAMP

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.alpha <= 0 or self.clamp <= 0:
            raise ValueError("alpha and clamp must be positive")


# Horn-Schunck neighbourhood average: 1/6 on the 4-neighbours, 1/12 diagonally.
_HS_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


def _hs_derivatives(e0: np.ndarray, e1: np.ndarray):
    # first differences averaged over the 2x2x2 cube, replicating the far edges
    p0 = np.pad(e0, ((0, 1), (0, 1)), mode="edge")
    p1 = np.pad(e1, ((0, 1), (0, 1)), mode="edge")
    ex = 0.25 * (
        p0[:-1, 1:] - p0[:-1, :-1] + p0[1:, 1:] - p0[1:, :-1]
        + p1[:-1, 1:] - p1[:-1, :-1] + p1[1:, 1:] - p1[1:, :-1]
    )
    ey = 0.25 * (
        p0[1:, :-1] - p0[:-1, :-1] + p0[1:, 1:] - p0[:-1, 1:]
        + p1[1:, :-1] - p1[:-1, :-1] + p1[1:, 1:] - p1[:-1, 1:]
    )
    et = 0.25 * (
        p1[:-1, :-1] - p0[:-1, :-1] + p1[1:, :-1] - p0[1:, :-1]
        + p1[:-1, 1:] - p0[:-1, 1:] + p1[1:, 1:] - p0[1:, 1:]
    )
    return ex, ey, et


def estimate_flow(prev, next, cfg: FlowEstimatorConfig | None = None) -> FlowField:
    """Dense optical flow between two grayscale frames by Horn-Schunck.

    Runs a fixed number of Jacobi iterations, so the result is a deterministic
    function of the frames and ``cfg``.  Output values are clamped to
    ``+/- cfg.clamp`` and rounded to float32 precision so they survive a
    ``.flo`` round trip unchanged.
    """
    cfg = cfg or FlowEstimatorConfig()
    e0 = np.asarray(prev, dtype=np.float64)
    e1 = np.asarray(next, dtype=np.float64)
    if e0.ndim != 2 or e0.shape != e1.shape:
        raise DimensionMismatch(f"frame shapes differ: {e0.shape} vs {e1.shape}")
    ex, ey, et = _hs_derivatives(e0, e1)
    denom = cfg.alpha**2 + ex**2 + ey**2
    u = np.zeros_like(e0)
    v = np.zeros_like(e0)
    for _ in range(cfg.iterations):
        u_bar = ndimage.correlate(u, _HS_KERNEL, mode="nearest")
        v_bar = ndimage.correlate(v, _HS_KERNEL, mode="nearest")
        t = (ex * u_bar + ey * v_bar + et) / denom
        u = u_bar - ex * t
        v = v_bar - ey * t
    u = np.clip(u, -cfg.clamp, cfg.clamp).astype(np.float32)
    v = np.clip(v, -cfg.clamp, cfg.clamp).astype(np.float32)
    return FlowField(u, v)


def list_sequence(directory, pattern: str) -> list[str]:
    """Paths ``pattern.format(i)`` for i = 0, 1, ... until the first gap."""
    paths = []
    i = 0
    while True:
        path = os.path.join(directory, pattern.format(i))
        if not os.path.exists(path):
            break
        paths.append(path)
        i += 1
    return paths
