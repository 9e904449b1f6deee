"""One ``key=value`` config file for the whole pipeline.

Keys are ``section.field`` (``sampler.n``, ``render.height``, ``train.lr``)
plus the top-level ``seed``. Every value is validated by the owning
dataclass before any work starts; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .raster import RenderConfig
from .sampling import SamplerConfig
from .toy.settings import ToyDims, TrainConfig

SAMPLE_MODES = ("default", "two-scale", "octant-cover")
CONTEXT_NAMES = ("none", "setup", "full")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    mode: str = "default"

    def __post_init__(self):
        if self.mode not in SAMPLE_MODES:
            raise ValueError(f"mode must be one of {SAMPLE_MODES}")


@dataclass(frozen=True)
class DistortConfig:
    draws: int = 40
    encoding: str = "binary-le"

    def __post_init__(self):
        if self.draws < 1:
            raise ValueError("draws must be >= 1")
        if self.encoding not in ("ascii", "binary-le"):
            raise ValueError("encoding must be ascii or binary-le")


@dataclass(frozen=True)
class LabelConfig:
    mos_lo: float = 1.0
    mos_hi: float = 5.0
    context: str = "none"

    def __post_init__(self):
        if not self.mos_hi > self.mos_lo:
            raise ValueError("mos_hi must exceed mos_lo")
        if self.context not in CONTEXT_NAMES:
            raise ValueError(f"context must be one of {CONTEXT_NAMES}")


@dataclass(frozen=True)
class DataConfig:
    """Sizes of the synthetic toy datasets."""

    base_texts: int = 2000
    captions: int = 100
    quality_samples: int = 40
    n_points: int = 2048
    loc_clouds: int = 20
    loc_draws: int = 20

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")


@dataclass(frozen=True)
class ProtocolConfig:
    splits: int = 5
    seeds: int = 10
    fit: str = "none"

    def __post_init__(self):
        if self.splits < 1 or self.seeds < 1:
            raise ValueError("splits and seeds must be >= 1")
        if self.fit not in ("none", "logistic4"):
            raise ValueError("fit must be none or logistic4")


def _stage2_default():
    return TrainConfig(epochs=60, batch_size=16, lr=0.1)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    distort: DistortConfig = field(default_factory=DistortConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    # a longer context than ToyDims' default so the full-context prompt fits
    toy: ToyDims = field(default_factory=lambda: ToyDims(context=320))
    base: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=4, batch_size=32, lr=0.1))
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, batch_size=16, lr=0.1))
    train: TrainConfig = field(default_factory=_stage2_default)
    data: DataConfig = field(default_factory=DataConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    # seeds come from the top-level key only
    _SEEDLESS = ("sampler", "base", "stage1", "train")

    @classmethod
    def sections(cls) -> list:
        return [f.name for f in dataclasses.fields(cls) if f.name != "seed"]

    @classmethod
    def keys(cls) -> list:
        out = ["seed"]
        default = cls()
        for sec in cls.sections():
            for f in dataclasses.fields(getattr(default, sec)):
                if f.name == "seed" and sec in cls._SEEDLESS:
                    continue
                out.append(f"{sec}.{f.name}")
        return out

    @classmethod
    def from_pairs(cls, pairs, source: str = "<config>") -> "PipelineConfig":
        """Build from ``(key, value_text, line)`` triples; all errors name the line."""
        default = cls()
        known = set(cls.keys())
        updates: dict = {}
        seed = default.seed
        for key, text, line in pairs:
            where = f"{source}:{line}"
            if key not in known:
                raise ConfigError(f"{where}: unknown key {key!r}")
            if key == "seed":
                seed = _parse(text, default.seed, where)
                continue
            sec, name = key.split(".", 1)
            current = getattr(getattr(default, sec), name)
            updates.setdefault(sec, {})[name] = _parse(text, current, where)
        kw = {"seed": seed}
        for sec, values in updates.items():
            try:
                kw[sec] = dataclasses.replace(getattr(default, sec), **values)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{source}: section {sec!r}: {e}") from None
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        return cls.from_pairs(_lines(text), str(path))

    @classmethod
    def load(cls, path=None, seed=None, overrides=()) -> "PipelineConfig":
        """Config file (optional), then ``key=value`` overrides, then ``seed``."""
        try:
            text = Path(path).read_text() if path else ""
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        pairs = list(_lines(text)) + list(_lines("\n".join(overrides)))
        cfg = cls.from_pairs(pairs, str(path) if path else "<overrides>")
        return cfg if seed is None else dataclasses.replace(cfg, seed=int(seed))

    def to_pairs(self) -> list:
        out = [("seed", str(self.seed))]
        for key in self.keys()[1:]:
            sec, name = key.split(".", 1)
            v = getattr(getattr(self, sec), name)
            out.append((key, ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_pairs())

    def to_dict(self) -> dict:
        return dict(self.to_pairs())

    # seeded views of the section configs

    def sampler_config(self) -> SamplerConfig:
        return dataclasses.replace(self.sampler, seed=self.seed)

    def train_config(self, stage: int) -> TrainConfig:
        cfg = {0: self.base, 1: self.stage1, 2: self.train}[stage]
        return dataclasses.replace(cfg, seed=self.seed)


def _lines(text: str):
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {raw.strip()!r}")
        k, v = (x.strip() for x in line.split("=", 1))
        yield k, v, ln


def _parse(text: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, tuple):
            return tuple(type(default[0])(x.strip()) for x in text.split(","))
        if isinstance(default, int):
            return int(text, 0)
        return type(default)(text)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None
