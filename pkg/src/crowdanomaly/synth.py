"""Deterministic synthetic crowd scenes with exact ground truth.

A scene is a background drift field (constant, or varying linearly from the
top row to the bottom row to mimic perspective), optional rectangular regions
with their own constant drift, per-pixel uniform jitter, and rectangular
anomalies whose flow replaces the background while they are active.

Jitter generator (version 1)
----------------------------
For flow ``f`` of stream ``s`` (0 = test sequence, 1 = training sequence),
pixel ``i`` in row-major order and component ``c`` (0 = u, 1 = v)::

    frame_seed = splitmix64(seed ^ (s << 32) ^ f)
    state      = splitmix64(frame_seed + (2*i + c) * 0x9E3779B97F4A7C15)
    x          = xorshift64star(state)        # one step: >>12, <<25, >>27, * 0x2545F4914F6CDD1D
    jitter     = noise * (2 * (x >> 11) / 2**53 - 1)

all arithmetic modulo 2**64.  Flow values are rounded to float32 so they
survive ``.flo`` files unchanged.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .evaluation import Event, GroundTruth, write_ground_truth
from .exceptions import InvalidSpec
from .flow_io import FlowField, write_flo

GENERATOR_VERSION = 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STAR = np.uint64(0x2545F4914F6CDD1D)


def splitmix64(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def xorshift64star(x):
    x = np.asarray(x, dtype=np.uint64)
    x = x ^ (x >> np.uint64(12))
    x = x ^ (x << np.uint64(25))
    x = x ^ (x >> np.uint64(27))
    with np.errstate(over="ignore"):
        return x * _STAR


def jitter(seed: int, stream: int, frame: int, shape: tuple[int, int], amplitude: float):
    """Uniform ``[-amplitude, amplitude)`` jitter for ``u`` and ``v`` of one flow."""
    n = shape[0] * shape[1]
    key = np.uint64((seed & 0xFFFFFFFFFFFFFFFF) ^ (stream << 32) ^ frame)
    frame_seed = splitmix64(key)
    k = np.arange(2 * n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = splitmix64(frame_seed + k * _GOLDEN)
    x = xorshift64star(state)
    r = (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    j = amplitude * (2.0 * r - 1.0)
    j = j.reshape(n, 2)
    return j[:, 0].reshape(shape), j[:, 1].reshape(shape)


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def slices(self):
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


@dataclass(frozen=True)
class Region:
    name: str
    rect: Rect
    u: float
    v: float


@dataclass(frozen=True)
class Anomaly:
    name: str
    start_frame: int
    end_frame: int
    rect: Rect
    u: float = 0.0
    v: float = 0.0
    relative: float | None = None


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    frame_count: int
    seed: int
    noise: float = 0.0
    training_frames: int = 0
    u: float = 1.0
    v: float = 0.0
    u_bottom: float | None = None
    v_bottom: float | None = None
    regions: tuple = field(default_factory=tuple)
    anomalies: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidSpec("width and height must be >= 1")
        if self.frame_count < 2:
            raise InvalidSpec("frame_count must be >= 2")
        if self.training_frames < 0 or self.training_frames == 1:
            raise InvalidSpec("training_frames must be 0 or >= 2")
        if not self.noise >= 0:
            raise InvalidSpec("noise amplitude must be >= 0")
        for item in (*self.regions, *self.anomalies):
            r = item.rect
            if r.w < 1 or r.h < 1 or r.x < 0 or r.y < 0 or r.x + r.w > self.width \
                    or r.y + r.h > self.height:
                raise InvalidSpec(f"{item.name}: rect {r} outside {self.width}x{self.height} frame")
        for a in self.anomalies:
            if not 0 <= a.start_frame <= a.end_frame < self.frame_count:
                raise InvalidSpec(f"{a.name}: frames {a.start_frame}-{a.end_frame} outside sequence")

    def background(self) -> tuple[np.ndarray, np.ndarray]:
        """Noise-free drift field ``(u, v)``."""
        H, W = self.height, self.width
        t = np.arange(H, dtype=np.float64)[:, None] / max(H - 1, 1)
        ub = self.u if self.u_bottom is None else self.u_bottom
        vb = self.v if self.v_bottom is None else self.v_bottom
        u = np.broadcast_to(self.u + (ub - self.u) * t, (H, W)).copy()
        v = np.broadcast_to(self.v + (vb - self.v) * t, (H, W)).copy()
        for reg in self.regions:
            u[reg.rect.slices()] = reg.u
            v[reg.rect.slices()] = reg.v
        return u, v


_SCENE_KEYS = {"width", "height", "frame_count", "seed", "noise", "training_frames"}
_BG_KEYS = {"u", "v", "u_bottom", "v_bottom"}
_RECT_KEYS = {"x", "y", "w", "h"}


def _num(section, key, kind=float, default=None):
    if key not in section:
        if default is None:
            raise InvalidSpec(f"[{section.name}] missing key {key!r}")
        return default
    try:
        return kind(section[key])
    except ValueError as exc:
        raise InvalidSpec(f"[{section.name}] {key}: {exc}") from exc


def _rect(section) -> Rect:
    return Rect(*(_num(section, k, int) for k in ("x", "y", "w", "h")))


def parse_scene(text: str) -> SceneSpec:
    """Parse a scene description (INI-style ``[section]`` / ``key = value``)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidSpec(str(exc)) from exc
    if "scene" not in cp:
        raise InvalidSpec("missing [scene] section")
    sc = cp["scene"]
    unknown = set(sc) - _SCENE_KEYS
    if unknown:
        raise InvalidSpec(f"[scene] unknown keys {sorted(unknown)}")
    bg = cp["background"] if "background" in cp else {}
    if set(bg) - _BG_KEYS:
        raise InvalidSpec(f"[background] unknown keys {sorted(set(bg) - _BG_KEYS)}")
    regions, anomalies = [], []
    for name in cp.sections():
        sec = cp[name]
        if name in ("scene", "background"):
            continue
        if name.startswith("region."):
            extra = set(sec) - _RECT_KEYS - {"u", "v"}
            if extra:
                raise InvalidSpec(f"[{name}] unknown keys {sorted(extra)}")
            regions.append(Region(name[7:], _rect(sec), _num(sec, "u"), _num(sec, "v")))
        elif name.startswith("anomaly."):
            extra = set(sec) - _RECT_KEYS - {"u", "v", "relative", "start_frame", "end_frame"}
            if extra:
                raise InvalidSpec(f"[{name}] unknown keys {sorted(extra)}")
            rel = _num(sec, "relative", float, default=float("nan"))
            if np.isnan(rel):
                if "u" not in sec or "v" not in sec:
                    raise InvalidSpec(f"[{name}] needs u and v, or relative")
                rel = None
            anomalies.append(Anomaly(name[8:], _num(sec, "start_frame", int),
                                     _num(sec, "end_frame", int), _rect(sec),
                                     _num(sec, "u", float, 0.0), _num(sec, "v", float, 0.0), rel))
        else:
            raise InvalidSpec(f"unknown section [{name}]")

    def bgnum(key, default):
        if key not in bg:
            return default
        try:
            return float(bg[key])
        except ValueError as exc:
            raise InvalidSpec(f"[background] {key}: {exc}") from exc

    return SceneSpec(
        width=_num(sc, "width", int),
        height=_num(sc, "height", int),
        frame_count=_num(sc, "frame_count", int),
        seed=_num(sc, "seed", int),
        noise=_num(sc, "noise", float, 0.0),
        training_frames=_num(sc, "training_frames", int, 0),
        u=bgnum("u", 1.0),
        v=bgnum("v", 0.0),
        u_bottom=bgnum("u_bottom", None),
        v_bottom=bgnum("v_bottom", None),
        regions=tuple(regions),
        anomalies=tuple(anomalies),
    )


def load_scene(path) -> SceneSpec:
    try:
        with open(path) as fh:
            return parse_scene(fh.read())
    except OSError as exc:
        raise InvalidSpec(f"{path}: {exc}") from exc


def bundled_scene(name: str) -> str:
    """Path of a scene file shipped with the package (``uniform``, ``perspective``, ``biker``)."""
    path = os.path.join(os.path.dirname(__file__), "scenes", f"{name}.scene")
    if not os.path.exists(path):
        raise InvalidSpec(f"no bundled scene named {name!r}")
    return path


def _flow(spec: SceneSpec, stream: int, f: int, base) -> FlowField:
    u0, v0 = base
    u, v = u0.copy(), v0.copy()
    if spec.noise > 0:
        ju, jv = jitter(spec.seed, stream, f, u.shape, spec.noise)
        u += ju
        v += jv
    if stream == 0:
        for a in spec.anomalies:
            if a.start_frame <= f <= a.end_frame:
                sl = a.rect.slices()
                if a.relative is None:
                    u[sl], v[sl] = a.u, a.v
                else:
                    u[sl], v[sl] = a.relative * u0[sl], a.relative * v0[sl]
    return FlowField(u.astype(np.float32), v.astype(np.float32))


def flow_at(spec: SceneSpec, f: int, training: bool = False, base=None) -> FlowField:
    """Flow field ``f`` of the test (or training) sequence."""
    return _flow(spec, 1 if training else 0, f, spec.background() if base is None else base)


def iter_flows(spec: SceneSpec, training: bool = False):
    """Lazily yield the flow fields of the test (or training) sequence."""
    base = spec.background()
    stream = 1 if training else 0
    n = (spec.training_frames if training else spec.frame_count) - 1
    for f in range(max(n, 0)):
        yield _flow(spec, stream, f, base)


def ground_truth(spec: SceneSpec) -> GroundTruth:
    labels = np.zeros(spec.frame_count, dtype=bool)
    masks = {}
    for a in spec.anomalies:
        for f in range(a.start_frame, a.end_frame + 1):
            labels[f] = True
            m = masks.setdefault(f, np.zeros((spec.height, spec.width), dtype=bool))
            m[a.rect.slices()] = True
    events = [Event(a.start_frame, a.end_frame, a.name) for a in spec.anomalies]
    return GroundTruth(labels, masks, events)


def generate(spec: SceneSpec) -> tuple[list[FlowField], GroundTruth]:
    """Test-sequence flow fields and their ground truth."""
    return list(iter_flows(spec)), ground_truth(spec)


def generate_training(spec: SceneSpec) -> list[FlowField]:
    """Anomaly-free training flows drawn from an independent jitter stream."""
    return list(iter_flows(spec, training=True))


def write_dataset(spec: SceneSpec, directory, flow_pattern: str = "flow_{:04d}.flo") -> dict:
    """Write ``train/`` and ``test/`` flow sequences plus ``test/gt``."""
    out = {}
    for name, training in (("test", False), ("train", True)):
        if training and spec.training_frames == 0:
            continue
        d = os.path.join(directory, name)
        os.makedirs(d, exist_ok=True)
        n = 0
        for f, flow in enumerate(iter_flows(spec, training)):
            write_flo(flow, os.path.join(d, flow_pattern.format(f)))
            n += 1
        out[name] = n
    write_ground_truth(os.path.join(directory, "test", "gt"), ground_truth(spec))
    return out
