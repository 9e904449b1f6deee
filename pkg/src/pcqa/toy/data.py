"""Procedural toy datasets: shape captions, quality ratings, distortion localization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from ..cloud import PointCloud, normalize
from ..distort import DISTORTION_TYPES, derive_seed, draw_labels, make_localization_sample, occupied_octants
from ..prompt import IMG, P_END, P_START, PTS, MosRange, answer_text, assemble_prompt, discretize
from ..raster import RenderConfig, render_views
from ..sampling import SamplerConfig, octant_cover_patches, sample_patches
from .tokenizer import OCTANT_WORDS, PAD, Tokenizer

SHAPES = ("sphere", "cube", "cylinder", "torus", "cone")
COLORS = {
    "red": (200, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 210),
    "yellow": (220, 200, 40),
    "white": (235, 235, 235),
}
TOY_RENDER = RenderConfig(height=32, width=32, point_size=0.06)

CAPTION_PROMPT = P_START + PTS + P_END + " Describe the object."
LOCALIZATION_PROMPT = (
    "This point cloud has one distorted octant. " + IMG * 6 + P_START + PTS + P_END
    + " Which octant is distorted and how?"
)


def _surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        p = rng.uniform(-1, 1, size=(n, 3))
        ax = rng.integers(3, size=n)
        p[np.arange(n), ax] = rng.choice([-1.0, 1.0], size=n)
        return p
    if kind == "cylinder":
        a = rng.uniform(0, 2 * np.pi, n)
        cap = rng.random(n) < 1 / 3
        r = np.where(cap, np.sqrt(rng.random(n)), 1.0)
        z = np.where(cap, rng.choice([-1.0, 1.0], size=n), rng.uniform(-1, 1, n))
        return np.stack([r * np.cos(a), r * np.sin(a), z], axis=1)
    if kind == "torus":
        u, v = rng.uniform(0, 2 * np.pi, (2, n))
        return np.stack([(1 + 0.4 * np.cos(v)) * np.cos(u), (1 + 0.4 * np.cos(v)) * np.sin(u),
                         0.4 * np.sin(v)], axis=1)
    if kind == "cone":
        a = rng.uniform(0, 2 * np.pi, n)
        h = np.sqrt(rng.random(n))
        base = rng.random(n) < 0.3
        r = np.where(base, np.sqrt(rng.random(n)), h)
        z = np.where(base, 1.0, 2 * h - 1)
        return np.stack([r * np.cos(a), r * np.sin(a), z], axis=1)
    raise ValueError(f"unknown shape {kind!r}")


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_shape(kind: str, n: int, rng: np.random.Generator, color=None, rotate: bool = True,
               source_id: str = "", shade: bool = True) -> PointCloud:
    """Surface samples of a unit-scale primitive with a soft shaded color."""
    pts = _surface(kind, n, rng)
    if rotate:
        pts = pts @ _rotation(rng).T
    base = np.asarray(COLORS[color] if isinstance(color, str) else
                      (color if color is not None else rng.integers(40, 220, 3)), dtype=np.float64)
    # smooth shading along a random direction plus a faint per-point texture
    d = rng.normal(size=3)
    gain = 0.75 + 0.25 * (pts @ (d / np.linalg.norm(d))) if shade else np.ones(n)
    col = base[None, :] * gain[:, None] + rng.normal(0, 3, size=(n, 3))
    return PointCloud(pts, np.clip(np.rint(col), 0, 255).astype(np.uint8), source_id)


def view_tensor(cloud, config: RenderConfig = TOY_RENDER) -> np.ndarray:
    """(6, H, W, 4) float32: RGB in [0, 1] and a coverage flag."""
    views = render_views(cloud, config)
    out = np.empty((6, config.height, config.width, 4), dtype=np.float32)
    for i, v in enumerate(views):
        out[i, ..., :3] = v.pixels / 255.0
        out[i, ..., 3] = np.isfinite(v.depth)
    return out


@dataclass
class ToySample:
    patches: np.ndarray  # (s, n, 6)
    views: Optional[np.ndarray]  # (6, H, W, 4) or None
    prompt: str
    answer: str
    labels: dict = field(default_factory=dict)


@dataclass
class ToyBatch:
    patches: torch.Tensor
    views: Optional[torch.Tensor]
    prefix: list
    suffix: list
    answers: torch.Tensor  # (B, A), PAD where absent
    pooled: bool = False

    def __len__(self):
        return self.patches.shape[0]


def collate(samples, tokenizer: Tokenizer, pooled: bool = False, dtype=torch.float32) -> ToyBatch:
    prefix, n_img, suffix = tokenizer.split_prompt(samples[0].prompt)
    for s in samples[1:]:
        if s.prompt != samples[0].prompt:
            raise ValueError("samples in one batch must share a prompt")
    answers = [tokenizer.encode(s.answer) for s in samples]
    width = max(len(a) for a in answers)
    ans = torch.full((len(samples), width), PAD, dtype=torch.long)
    for i, a in enumerate(answers):
        ans[i, : len(a)] = torch.tensor(a)
    patches = torch.as_tensor(np.stack([s.patches for s in samples]), dtype=dtype)
    views = None
    if n_img:
        views = torch.as_tensor(np.stack([s.views for s in samples]), dtype=dtype)
    return ToyBatch(patches, views, prefix, suffix, ans, pooled)


# --------------------------------------------------------------------------
# datasets

def caption_set(count: int, seed: int, n_points: int = 1024, n_toy: int = 64, s: int = 1) -> list:
    """Shape/color caption pairs for projector alignment."""
    rng = np.random.default_rng(seed)
    out = []
    names = list(COLORS)
    for i in range(count):
        kind = SHAPES[i % len(SHAPES)]
        color = names[int(rng.integers(len(names)))]
        cloud = normalize(make_shape(kind, n_points, rng, color, source_id=f"cap{i}"))
        ps = sample_patches(cloud, SamplerConfig(n=n_toy, s=s, seed=seed))
        out.append(ToySample(ps.patches.astype(np.float32), None, CAPTION_PROMPT, f"a {color} {kind}",
                             {"shape": kind, "color": color}))
    return out


def toy_patches(cloud: PointCloud, n: int, s: int, seed: int):
    """Patch set for a toy sample; clouds thinned below ``n`` points are padded with repeats."""
    size = len(cloud.positions)
    if size < n:
        extra = np.random.default_rng(seed).choice(size, n - size)
        idx = np.concatenate([np.arange(size), extra])
        colors = None if cloud.colors is None else cloud.colors[idx]
        cloud = replace(cloud, positions=cloud.positions[idx], colors=colors)
    return sample_patches(cloud, SamplerConfig(n=n, s=s, seed=seed))


def synthetic_mos(dtype: Optional[str], severity: int, rng: np.random.Generator) -> float:
    """Toy rating: pristine near 5, dropping with severity."""
    base = 4.8 if dtype is None else 4.8 - 0.6 * severity
    return float(np.clip(base + rng.normal(0, 0.15), 1.0, 5.0))


def quality_set(count: int, seed: int, n_points: int = 2048, dims=None, prompt: Optional[str] = None,
                mos_range: MosRange = MosRange(1.0, 5.0)) -> list:
    """Whole-cloud distortions rated by ``synthetic_mos``; s patches per sample."""
    from ..distort import apply_distortion

    s = 3 if dims is None else dims.s
    n_toy = 256 if dims is None else dims.n_toy
    prompt = assemble_prompt() if prompt is None else prompt
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        kind = SHAPES[i % len(SHAPES)]
        cloud = make_shape(kind, n_points, rng, source_id=f"q{i}")
        severity = int(rng.integers(0, 8))
        dtype = None
        if severity:
            dtype = DISTORTION_TYPES[int(rng.integers(len(DISTORTION_TYPES)))]
            cloud = apply_distortion(cloud, dtype, severity, int(rng.integers(2**31)))
        mos = synthetic_mos(dtype, severity, rng)
        norm = normalize(cloud)
        ps = toy_patches(norm, n_toy, s, seed)
        level = discretize(mos, mos_range)
        out.append(ToySample(ps.patches.astype(np.float32), view_tensor(norm), prompt, answer_text(level),
                             {"mos": mos, "level": int(level), "dtype": dtype, "severity": severity}))
    return out


def localization_answer(octant: int, dtype: str) -> str:
    return f"{OCTANT_WORDS[octant]} {dtype}"


SYMMETRIC_SHAPES = ("sphere", "cube", "cylinder", "torus")


def localization_benchmark(n_clouds: int, draws: int, seed: int, n_points: int = 4096,
                           n_toy: int = 256, shapes=SYMMETRIC_SHAPES, rotate: bool = False) -> list:
    """``n_clouds * draws`` single-octant distortion samples with 8 octant-cover patches.

    Pristine shapes are axis-aligned and mirror-symmetric by default, so the
    eight octants of a clean cloud look alike. Labels are uniform over
    (octant, type, severity); ``labels['content']`` names the pristine cloud
    for content-separated splits.
    """
    rng = np.random.default_rng(seed)
    out = []
    for c in range(n_clouds):
        kind = shapes[c % len(shapes)]
        pristine = make_shape(kind, n_points, rng, rotate=rotate, shade=rotate, source_id=f"p{seed}_{c}")
        occ = occupied_octants(pristine)
        for row in range(draws):
            sd = derive_seed(seed, pristine.source_id, row)
            octant, dtype, severity = draw_labels(np.random.default_rng(sd), occ)
            smp = make_localization_sample(pristine, octant, dtype, severity, sd)
            norm = normalize(smp.cloud)
            ps = octant_cover_patches(norm, n_toy)
            out.append(ToySample(ps.patches.astype(np.float32), view_tensor(norm), LOCALIZATION_PROMPT,
                                 localization_answer(octant, dtype),
                                 {**smp.labels(), "content": pristine.source_id}))
    return out


def _text_only(prompt: str) -> str:
    return prompt.replace(IMG, "").replace(P_START + PTS + P_END, "")


def base_text_corpus(count: int, seed: int) -> list:
    """Task templates with uniformly random answers and no image or point content.

    Pretraining on these teaches the LM the answer formats and vocabulary but
    nothing about which answer fits a given cloud.
    """
    from ..prompt import LikertLevel

    rng = np.random.default_rng(seed)
    colors = list(COLORS)
    templates = (
        lambda: _text_only(LOCALIZATION_PROMPT) + " " + localization_answer(
            int(rng.integers(8)), DISTORTION_TYPES[int(rng.integers(5))]),
        lambda: _text_only(assemble_prompt()) + " " + answer_text(LikertLevel(int(rng.integers(1, 6)))),
        lambda: _text_only(CAPTION_PROMPT) + f" a {colors[int(rng.integers(5))]} {SHAPES[int(rng.integers(5))]}",
    )
    return [templates[int(rng.integers(len(templates)))]() for _ in range(count)]
