"""Toy model sizes and training hyperparameters; importable without torch."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

# full-scale values these dims stand in for; documentation only
FULL_SCALE = {"m": 513, "c_tok": 5120, "vocab": 32003, "rank": 128, "alpha": 256}


@dataclass(frozen=True)
class ToyDims:
    s: int = 3
    n_toy: int = 256
    d: int = 6
    m: int = 17
    c: int = 32
    c_tok: int = 64
    t: int = 4
    layers: int = 2
    heads: int = 4
    vocab: int = 64
    rank: int = 4
    alpha: float = 8.0
    context: int = 256
    image_size: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 1:
                raise ValueError(f"{k} must be >= 1, got {v}")
        if self.d != 6:
            raise ValueError("points carry xyz + rgb, d must be 6")
        if self.c_tok % self.heads:
            raise ValueError("c_tok must be divisible by heads")
        g = math.isqrt(self.t)
        if g * g != self.t or self.image_size % g:
            raise ValueError("t must be a square grid that divides image_size")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    warmup: float = 0.3
    weight_decay: float = 0.0
    clip: float = 1.0
    optimizer: str = "sgd"  # or "adam"
    seed: int = 0
    pooled: bool = False
    freeze_view_emb: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not 0.0 <= self.warmup <= 1.0:
            raise ValueError("lr must be positive and warmup in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse a ``key=value`` file; unknown keys are an error."""
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value")
            k, v = (x.strip() for x in line.split("=", 1))
            if k not in known:
                raise ValueError(f"{path}:{ln}: unknown key {k!r}")
            kw[k] = _parse_value(v, getattr(cls, k))
        return cls(**kw)


def _parse_value(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return type(default)(text)
