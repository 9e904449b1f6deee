"""End-to-end toy runs: quality overfitting and the held-out localization benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import base_text_corpus, caption_set, localization_benchmark, quality_set
from .model import ToyDims, ToyModel
from .train import TrainConfig, answer_accuracy, localization_accuracy, pretrain_base, train


@dataclass
class BenchConfig:
    n_clouds: int = 20
    draws: int = 20
    n_points: int = 4096
    test_fraction: float = 0.2
    base_texts: int = 2000
    base: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=4, batch_size=32, lr=0.1))
    captions: int = 100
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, batch_size=16, lr=0.1))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=80, batch_size=16, lr=0.1,
                                                                    pooled=True))
    dims: ToyDims = field(default_factory=lambda: ToyDims(s=8))


def split_by_content(samples: list, seed: int, test_fraction: float = 0.2):
    """Content-separated train/test split on ``labels['content']``."""
    contents = sorted({s.labels["content"] for s in samples})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(contents))
    n_test = max(1, int(round(test_fraction * len(contents))))
    test = {contents[i] for i in order[:n_test]}
    return ([s for s in samples if s.labels["content"] not in test],
            [s for s in samples if s.labels["content"] in test])


def prepared_model(dims: ToyDims, seed: int, config: BenchConfig) -> ToyModel:
    """Fresh model after base pretraining (stage 0) and projector alignment (stage 1)."""
    model = ToyModel(dims, seed)
    pretrain_base(model, base_text_corpus(config.base_texts, seed), replace(config.base, seed=seed))
    if config.captions and config.stage1.epochs:
        caps = caption_set(config.captions, seed, n_toy=64)
        train(model, caps, 1, replace(config.stage1, seed=seed))
    return model


def run_localization(seed: int, freeze_view_emb: bool = False, config: BenchConfig = BenchConfig(),
                     data: list | None = None) -> dict:
    """Train on 4/5 of the pristine contents, report accuracy on the rest."""
    t0 = time.perf_counter()
    if data is None:
        data = localization_benchmark(config.n_clouds, config.draws, seed, config.n_points, config.dims.n_toy)
    tr, te = split_by_content(data, seed, config.test_fraction)
    model = prepared_model(config.dims, seed, config)
    cfg = replace(config.stage2, seed=seed, freeze_view_emb=freeze_view_emb)
    curve = train(model, tr, 2, cfg)
    ident, loc = localization_accuracy(model, te, pooled=cfg.pooled)
    tr_ident, tr_loc = localization_accuracy(model, tr, pooled=cfg.pooled)
    return {
        "seed": seed, "freeze_view_emb": freeze_view_emb, "n_train": len(tr), "n_test": len(te),
        "identification": ident, "localization": loc,
        "train_identification": tr_ident, "train_localization": tr_loc,
        "loss_curve": curve, "seconds": time.perf_counter() - t0, "model": model,
    }


def run_quality_overfit(seed: int, count: int = 20, epochs: int = 300, target: float = 0.95,
                        config: BenchConfig = BenchConfig(), lr: float = 0.1, check_every: int = 10) -> dict:
    """Fit ``count`` synthetic quality samples; stop once answer accuracy reaches ``target``."""
    t0 = time.perf_counter()
    dims = ToyDims()
    data = quality_set(count, seed, dims=dims)
    model = prepared_model(dims, seed, config)
    acc = [answer_accuracy(model, data)]

    def stop(epoch, curve):
        if (epoch + 1) % check_every:
            return False
        acc.append(answer_accuracy(model, data))
        return acc[-1] >= target

    cfg = TrainConfig(epochs=epochs, batch_size=count, lr=lr, seed=seed)
    curve = train(model, data, 2, cfg, stop=stop)
    final = answer_accuracy(model, data)
    return {"seed": seed, "epochs": len(curve), "accuracy": final, "loss_curve": curve,
            "seconds": time.perf_counter() - t0, "model": model}
