"""Toy model as an evaluation-protocol runner, plus loaders for preprocessed data."""

from __future__ import annotations

import copy
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..cloud import normalize, read_jsonl, resolve
from ..distort import DISTORTION_TYPES, apply_distortion
from ..prompt import MosRange, answer_text, assemble_prompt, discretize
from ..sampling import load_patchset
from .data import SHAPES, ToySample, make_shape, synthetic_mos, toy_patches, view_tensor
from .model import ToyModel
from .train import TrainConfig, predict_score, train


def subsample_patches(patches: np.ndarray, n_toy: int, seed: int) -> np.ndarray:
    """Draw ``n_toy`` points per patch without replacement; identity when sizes match."""
    s, n, _ = patches.shape
    if n < n_toy:
        raise ValueError(f"patches hold {n} points, need {n_toy}")
    if n == n_toy:
        return patches.astype(np.float32)
    rng = np.random.default_rng(seed)
    idx = np.stack([np.sort(rng.choice(n, n_toy, replace=False)) for _ in range(s)])
    return np.take_along_axis(patches, idx[..., None], axis=1).astype(np.float32)


def load_view_tensor(paths, size: int, background=(128, 128, 128)) -> np.ndarray:
    """(6, size, size, 4) from saved view PNGs: box-filtered RGB and covered fraction."""
    from ..raster import load_view

    out = []
    for p in paths:
        px = load_view(p)
        h, w, _ = px.shape
        if h % size or w % size:
            raise ValueError(f"{p}: {h}x{w} does not divide into {size}x{size}")
        cov = (px != np.asarray(background, dtype=np.uint8)).any(axis=-1).astype(np.float32)
        rgb = px.astype(np.float32) / 255.0
        stack = np.concatenate([rgb, cov[..., None]], axis=-1)
        out.append(stack.reshape(size, h // size, size, w // size, 4).mean(axis=(1, 3)))
    return np.stack(out).astype(np.float32)


def instruction_rows(path, dims, background=(128, 128, 128)) -> list:
    """Instruction JSONL rows with their patch tensors and views loaded in memory."""
    base = Path(path).parent
    rows = []
    for r in read_jsonl(path):
        ps = load_patchset(resolve(r["patch_path"], base))
        if ps.s != dims.s:
            raise ValueError(f"{r['patch_path']}: {ps.s} patches, model expects {dims.s}")
        views = load_view_tensor([resolve(v, base) for v in r["view_paths"]], dims.image_size, background)
        rows.append({**r, "patches": ps.patches, "views": views})
    return rows


def synthetic_quality_rows(n_contents: int, variants: int, seed: int, dims, n_points: int = 2048,
                           pool: int = 2) -> list:
    """Rated distortions of ``n_contents`` shapes, ``variants`` each.

    Patches hold ``pool * n_toy`` points so the sampling seed has something
    to choose from at prediction time.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(n_contents):
        pristine = make_shape(SHAPES[c % len(SHAPES)], n_points, rng, source_id=f"content{c:03d}")
        for v in range(variants):
            severity = int(rng.integers(0, 8))
            dtype = None
            cloud = pristine
            if severity:
                dtype = DISTORTION_TYPES[int(rng.integers(len(DISTORTION_TYPES)))]
                cloud = apply_distortion(pristine, dtype, severity, int(rng.integers(2**31)))
            norm = normalize(cloud)
            ps = toy_patches(norm, pool * dims.n_toy, dims.s, seed)
            rows.append({"content_id": pristine.source_id, "mos": synthetic_mos(dtype, severity, rng),
                         "patches": ps.patches, "views": view_tensor(norm), "dtype": dtype,
                         "severity": severity})
    return rows


def row_sample(row: dict, dims, seed: int, prompt=None, mos_range: MosRange = MosRange(1.0, 5.0)) -> ToySample:
    prompt = row.get("prompt") or prompt or assemble_prompt()
    level = discretize(float(row["mos"]), mos_range)
    return ToySample(subsample_patches(row["patches"], dims.n_toy, seed), row["views"], prompt,
                     answer_text(level), {"mos": float(row["mos"]), "content": row["content_id"]})


class ToyRunner:
    """Fine-tunes a copy of ``model`` (stage 2) per split, then predicts dequantized scores."""

    def __init__(self, model: ToyModel, config: TrainConfig, mos_range: MosRange = MosRange(1.0, 5.0),
                 train_seed: int = 0):
        self.model = model
        self.config = config
        self.mos_range = mos_range
        self.train_seed = train_seed
        self.curves = []

    def fit(self, train_rows):
        dims = self.model.dims
        model = copy.deepcopy(self.model)
        data = [row_sample(r, dims, self.train_seed, mos_range=self.mos_range) for r in train_rows]
        if self.config.epochs:
            self.curves.append(train(model, data, 2, replace(self.config, seed=self.train_seed)))
        pooled = self.config.pooled

        def predict(row, seed):
            return predict_score(model, row_sample(row, dims, seed, mos_range=self.mos_range), pooled)

        return predict
