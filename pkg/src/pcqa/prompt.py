"""Likert quantization of MOS values and instruction prompt assembly."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .cloud import read_jsonl, resolve, write_jsonl


class LikertLevel(IntEnum):
    BAD = 1
    POOR = 2
    FAIR = 3
    GOOD = 4
    EXCELLENT = 5

    @property
    def word(self) -> str:
        return self.name.lower()

    @classmethod
    def from_word(cls, word: str) -> "LikertLevel":
        return cls[word.upper()]


LEVEL_WORDS = tuple(level.word for level in LikertLevel)


@dataclass(frozen=True)
class MosRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"invalid MOS range [{self.lo}, {self.hi}]")

    def to_unit5(self, mos: float) -> float:
        """Linear map of ``mos`` onto the 1..5 scale."""
        return 1.0 + 4.0 * (mos - self.lo) / (self.hi - self.lo)

    def to_level_scale(self, mos: float) -> float:
        """Continuous score on which level ``i`` is the centre of its bin.

        Bins are one unit wide here ([0.5, 5.5] clipped to [1, 5]), so a level
        index is never more than 0.5 from the score that produced it.
        """
        t = (mos - self.lo) / (self.hi - self.lo)
        return min(max(0.5 + 5.0 * t, 1.0), 5.0)


def discretize(mos: float, rng: MosRange) -> LikertLevel:
    """Equal-width binning of ``mos`` into five levels; ``hi`` maps to 5."""
    if not math.isfinite(mos):
        raise ValueError("mos must be finite")
    if mos < rng.lo or mos > rng.hi:
        warnings.warn(f"MOS {mos} outside [{rng.lo}, {rng.hi}], clamping", stacklevel=2)
        mos = min(max(mos, rng.lo), rng.hi)
    level = 1 + math.floor(5 * (mos - rng.lo) / (rng.hi - rng.lo))
    return LikertLevel(min(level, 5))


def dequantize(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (5,):
        raise ValueError(f"expected 5 level probabilities, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("level probabilities must be a non-negative simplex point")
    return float(np.dot(np.arange(1, 6), p))


# --------------------------------------------------------------------------
# prompt text

IMG = "{IMG}"
PTS = "{PTS}"
P_START = "<p_start>"
P_END = "<p_end>"

TASK_PREFIX = (
    "This is a point cloud rated for quality. It was displayed to a human in a single "
    "stimulus setup with absolute category ratings. "
)
QUESTION = "Can you rate the quality of the point cloud?"

LSPCQA_SETUP = (
    "In the subjective experiment, the participants sit in a controlled environment. "
    "Specifically, the zoom rate is set as 1:1. The presentation device used in subjective "
    "experiments is Dell SE2216H with a 21.5-inch monitor with a resolution of 1920×1080 "
    "pixels. The sitting posture of the participants is adjusted to ensure that their eyes "
    "are at the same height as the center of the screen. The viewing distance is about three "
    "times the height of the rendered point cloud (≈ 0.75 meters). The subjective "
    "experiment is conducted indoors, under a normal lighting condition."
)
LSPCQA_RENDER = (
    "The point cloud is rendered with a point size of 2 mm with cameras at 2.5m from the "
    "object and perspective projection with square primitives."
)

CONTEXTS = {
    "none": ("", ""),
    "setup": (LSPCQA_SETUP + " ", ""),
    "full": (LSPCQA_SETUP + " ", LSPCQA_RENDER + " "),
}


def assemble_prompt(setup_text: str = "", render_text: str = "") -> str:
    """USER turn: task text, contexts, 6 image slots, the point span, question.

    The contexts are substituted as ``setup_text + render_text`` with nothing
    added, so callers own any separating whitespace.
    """
    return TASK_PREFIX + setup_text + render_text + IMG * 6 + P_START + PTS + P_END + " " + QUESTION


def answer_text(level: LikertLevel) -> str:
    return f"The quality of the point cloud is {LikertLevel(level).word}."


@dataclass
class InstructionSample:
    prompt_text: str
    setup_text: str
    render_text: str
    view_paths: list
    patch_path: str
    answer_level: LikertLevel
    mos: float
    content_id: str = ""

    def to_dict(self) -> dict:
        return {
            "content_id": self.content_id,
            "prompt": self.prompt_text,
            "view_paths": list(self.view_paths),
            "patch_path": self.patch_path,
            "answer": answer_text(self.answer_level),
            "mos": self.mos,
            "level": int(self.answer_level),
        }


def _relocate(path: str, old_base: Path, new_base: Path) -> str:
    if Path(path).is_absolute():
        return path
    return os.path.relpath(resolve(path, old_base), new_base)


def build_instruction_dataset(manifest, mos_range: MosRange, contexts=("", ""), out_path=None,
                              check_files: bool = True) -> list:
    """One instruction sample per preprocessed manifest row.

    Rows need ``view_paths`` (6) and ``patch_path`` as written by preprocessing.
    Relative paths are rewritten to stay valid next to ``out_path``.
    """
    base = None
    if isinstance(manifest, (str, Path)):
        base = Path(manifest).parent
        rows = read_jsonl(manifest)
    else:
        rows = [r if isinstance(r, dict) else r.to_dict() for r in manifest]
    setup_text, render_text = contexts
    prompt = assemble_prompt(setup_text, render_text)
    samples = []
    for i, row in enumerate(rows):
        views = row.get("view_paths")
        patch = row.get("patch_path")
        if not views or len(views) != 6 or not patch:
            raise ValueError(f"row {i} ({row.get('content_id')}) lacks view_paths/patch_path")
        if check_files:
            for p in list(views) + [patch]:
                full = resolve(p, base) if base is not None else Path(p)
                if not full.exists():
                    raise FileNotFoundError(f"row {i}: missing file {full}")
        if base is not None and out_path is not None:
            views = [_relocate(v, base, Path(out_path).parent) for v in views]
            patch = _relocate(patch, base, Path(out_path).parent)
        mos = float(row["mos"])
        samples.append(InstructionSample(prompt, setup_text, render_text, list(views), patch,
                                         discretize(mos, mos_range), mos,
                                         str(row.get("content_id", ""))))
    if out_path is not None:
        write_jsonl(out_path, (s.to_dict() for s in samples))
    return samples
