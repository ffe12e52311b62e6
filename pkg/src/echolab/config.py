"""Pipeline configuration: typed sections read from a ``key = value`` file.

Each ``[section]`` of the file maps onto one dataclass below. Unknown sections
or keys are usage errors, so a typo never silently falls back to a default.
Tuples are written comma-separated (``d_ed = 4.5, 6.0``).
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .echodata import ToyConfig
from .flowmatch import SELECTORS


class ConfigFileError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class AvaeSection:
    steps: int = 1500
    batch: int = 32
    lr: float = 1e-3
    lam: float = 0.1
    gamma: float = 1e-6
    warmup_frac: float = 0.3
    width: int = 32
    latent_channels: int = 2
    compression: int = 4


@dataclass
class LifmSection:
    steps: int = 8000
    batch: int = 32
    lr: float = 1e-3
    width: int = 64
    blocks: int = 3
    p_field: float = 0.1
    p_all: float = 0.1
    cosine: bool = True


@dataclass
class LvfmSection:
    steps: int = 3000
    batch: int = 16
    lr: float = 1e-3
    width: int = 32
    blocks: int = 3
    p_field: float = 0.1
    p_all: float = 0.1
    cosine: bool = False


@dataclass
class SamplerSection:
    steps: int = 100
    cfg_scale: float = 2.0
    negative: str = "none"
    batch: int = 50


@dataclass
class ReidSection:
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    width: int = 64
    dim: int = 64
    percentile: float = 95.0


@dataclass
class SynthSection:
    videos_per_anatomy: int = 2
    ef_low: float = 10.0
    ef_high: float = 90.0
    candidate_batch: int = 100
    max_candidates: int = 5000


@dataclass
class EfSection:
    epochs: int = 20
    batch: int = 16
    lr: float = 1e-3


@dataclass
class PipelineConfig:
    data: ToyConfig = field(default_factory=ToyConfig)
    avae: AvaeSection = field(default_factory=AvaeSection)
    lifm: LifmSection = field(default_factory=LifmSection)
    lvfm: LvfmSection = field(default_factory=LvfmSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    reid: ReidSection = field(default_factory=ReidSection)
    synth: SynthSection = field(default_factory=SynthSection)
    ef: EfSection = field(default_factory=EfSection)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        s = self.synth
        if not 0 <= s.ef_low < s.ef_high <= 100:
            raise ConfigFileError(f"EF sampling range must satisfy 0 <= low < high <= 100, got [{s.ef_low}, {s.ef_high}]")
        if s.videos_per_anatomy < 1:
            raise ConfigFileError("videos_per_anatomy must be >= 1")
        if self.sampler.negative not in SELECTORS:
            raise ConfigFileError(f"unknown negative selector {self.sampler.negative!r}; choose from {SELECTORS}")
        if self.sampler.steps < 1 or self.sampler.cfg_scale < 0:
            raise ConfigFileError("sampler needs steps >= 1 and cfg_scale >= 0")
        if not 0 <= self.reid.percentile <= 100:
            raise ConfigFileError("re-id percentile must lie in [0, 100]")
        if self.data.size % self.avae.compression:
            raise ConfigFileError("image size must be divisible by the AVAE compression factor")
        for name in ("lifm", "lvfm"):
            sec = getattr(self, name)
            if not (0 <= sec.p_field <= 1 and 0 <= sec.p_all <= 1):
                raise ConfigFileError(f"{name} dropout probabilities must lie in [0, 1]")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigFileError("seed must be an unsigned 64-bit integer")
        for split, n in self.data.split_sizes().items():
            if n < 2:
                raise ConfigFileError(f"split {split!r} needs at least 2 videos")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Stable digest of every setting; artifacts record it to detect staleness."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=seed, data=dataclasses.replace(self.data, seed=seed))


_SECTIONS = {f.name: f for f in dataclasses.fields(PipelineConfig) if f.name != "seed"}


def _coerce(raw: str, tp, where: str):
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            args = typing.get_args(tp)
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(a(p) for a, p in zip(args, parts))
        if tp is bool:
            word = raw.strip().lower()
            if word not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError("expected true or false")
            return configparser.ConfigParser.BOOLEAN_STATES[word]
        return tp(raw)
    except ValueError as exc:
        raise ConfigFileError(f"{where}: cannot parse {raw!r} ({exc})") from None


def _build(cls, items: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(items) - known
    if unknown:
        raise ConfigFileError(f"[{section}] unknown keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"[{section}] {k}") for k, v in items.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigFileError(f"[{section}] {exc}") from None


def parse_config(text: str, source: str = "<string>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigFileError(f"{source}: {exc}") from None
    sections = {}
    seed = 0
    for name in parser.sections():
        items = dict(parser.items(name))
        if name == "run":
            extra = set(items) - {"seed"}
            if extra:
                raise ConfigFileError(f"[run] unknown keys: {sorted(extra)}")
            if "seed" in items:
                seed = _coerce(items["seed"], int, "[run] seed")
            continue
        if name not in _SECTIONS:
            raise ConfigFileError(f"{source}: unknown section [{name}]")
        sections[name] = _build(typing.get_type_hints(PipelineConfig)[name], items, name)
    cfg = PipelineConfig(**sections, seed=seed)
    return cfg.with_seed(seed)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: PipelineConfig) -> str:
    """Inverse of ``parse_config`` (round-trips through it exactly)."""
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in dataclasses.fields(sec):
            v = getattr(sec, f.name)
            if name == "data" and f.name == "seed":
                continue
            lines.append(f"{f.name} = {', '.join(map(repr, v)) if isinstance(v, tuple) else v}")
        lines.append("")
    return "\n".join(lines)
