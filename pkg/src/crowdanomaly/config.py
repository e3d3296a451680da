"""Run configuration: one INI-style file with ``[section]`` / ``key = value``.

Sections are ``paths``, ``flow``, ``descriptor``, ``detector``, ``evaluation``
and ``sweep``.  Missing keys take their defaults and unknown keys are
rejected.  :func:`dump_config` writes every key in a fixed order, so
``parse_config(dump_config(c)) == c``.

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields

from .descriptor import DescriptorParams
from .detector import DetectorConfig
from .exceptions import ConfigError
from .flow_io import FlowEstimatorConfig

FLOW_SOURCES = ("precomputed", "estimate")


@dataclass(frozen=True)
class PathsSection:
    train_frames: str = ""
    train_flows: str = ""
    test_frames: str = ""
    test_flows: str = ""
    model: str = ""
    gt: str = ""
    output: str = ""
    scene: str = ""


@dataclass(frozen=True)
class FlowSection:
    source: str = "precomputed"
    flo_pattern: str = "flow_{:04d}.flo"
    frame_pattern: str = "frame_{:04d}.pgm"
    iterations: int = 100
    alpha: float = 15.0
    clamp: float = 32.0

    def __post_init__(self):
        if self.source not in FLOW_SOURCES:
            raise ValueError(f"source must be one of {FLOW_SOURCES}, got {self.source!r}")
        for pattern in (self.flo_pattern, self.frame_pattern):
            try:
                pattern.format(0)
            except (IndexError, KeyError, ValueError) as exc:
                raise ValueError(f"bad file pattern {pattern!r}: {exc}") from exc
        self.estimator()

    def estimator(self) -> FlowEstimatorConfig:
        return FlowEstimatorConfig(self.iterations, self.alpha, self.clamp)


@dataclass(frozen=True)
class DescriptorSection:
    patch_w: int = 3
    patch_h: int = 3
    clip_length: int = 10
    n_mag: int = 8
    n_ang: int = 8
    r_max: float | None = None

    def __post_init__(self):
        if self.patch_w < 1 or self.patch_h < 1:
            raise ValueError("patch sizes must be >= 1")
        if self.clip_length < 2:
            raise ValueError("clip_length must be >= 2")
        self.params()

    def params(self) -> DescriptorParams:
        return DescriptorParams.for_clip_length(self.clip_length, self.n_mag, self.n_ang, self.r_max)


@dataclass(frozen=True)
class EvaluationSection:
    overlap: float = 0.4
    merge_gap: int = 10
    steps: int = 50

    def __post_init__(self):
        if not 0.0 < self.overlap <= 1.0:
            raise ValueError("overlap must lie in (0, 1]")
        if self.merge_gap < 0:
            raise ValueError("merge_gap must be >= 0")
        if self.steps != 0 and self.steps < 2:
            raise ValueError("steps must be 0 (exact) or >= 2")


@dataclass(frozen=True)
class SweepSection:
    k: tuple = (15, 30, 50, 70)

    def __post_init__(self):
        if not self.k or any(k < 2 for k in self.k):
            raise ValueError("sweep K values must all be >= 2")


@dataclass(frozen=True)
class RunConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    flow: FlowSection = field(default_factory=FlowSection)
    descriptor: DescriptorSection = field(default_factory=DescriptorSection)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    base_dir: str = field(default="", compare=False)

    def path(self, key: str) -> str:
        value = getattr(self.paths, key)
        if not value:
            raise ConfigError(f"[paths] {key} is not set")
        return os.path.join(self.base_dir, value) if self.base_dir else value


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig) if f.name != "base_dir"}


def _convert(raw: str, kind, where: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "float | None":
            return None if raw.lower() in ("", "auto") else float(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _kind(section_cls, f) -> object:
    t = f.type
    if isinstance(t, str):
        return {"int": int, "float": float, "str": str, "tuple": tuple}.get(t, t)
    return t


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base_dir: str = "") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    built = {}
    for name, factory in _SECTIONS.items():
        cls = factory
        by_key = {f.name.lower(): f for f in fields(cls)}
        values = {}
        if name in cp:
            extra = set(cp[name]) - set(by_key)
            if extra:
                raise ConfigError(f"[{name}] unknown keys {sorted(extra)}")
            for key, raw in cp[name].items():
                f = by_key[key]
                values[f.name] = _convert(raw, _kind(cls, f), f"[{name}] {key}")
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return RunConfig(**built, base_dir=base_dir)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form: every section and key, fixed order."""
    lines = []
    for name in _SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name.lower()} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def replace_section(cfg: RunConfig, name: str, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **{name: dataclasses.replace(getattr(cfg, name), **changes)})
