"""Finite-difference check of the full toy forward/backward pass in float64."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .data import collate
from .model import ToyModel, answer_loss


@dataclass
class GradCheckResult:
    names: list  # parameter tensor of each probe
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def rel_errors(self) -> np.ndarray:
        """Per-probe |a - n| / max(|a|, |n|, floor), floor = 1e-6 of the largest gradient."""
        scale = max(float(np.abs(self.analytic).max()), float(np.abs(self.numeric).max()), 1e-300)
        den = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), 1e-6 * scale)
        return np.abs(self.analytic - self.numeric) / den

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max())

    @property
    def global_rel_error(self) -> float:
        """||a - n|| / max(||a||, ||n||) over all probes."""
        d = np.linalg.norm(self.analytic - self.numeric)
        return float(d / max(np.linalg.norm(self.analytic), np.linalg.norm(self.numeric), 1e-300))

    @property
    def components(self) -> set:
        return {n.split(".")[0] for n in self.names}


def _probes(model, count: int, rng: np.random.Generator) -> list:
    """One probe in every parameter tensor, the rest spread at random."""
    params = list(model.named_parameters())
    picks = [(name, int(rng.integers(p.numel()))) for name, p in params]
    sizes = np.array([p.numel() for _, p in params], dtype=np.float64)
    while len(picks) < count:
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        picks.append((params[k][0], int(rng.integers(params[k][1].numel()))))
    return list(dict.fromkeys(picks))


def gradient_check(model: ToyModel, samples: list, count: int = 256, h: float = 1e-4, seed: int = 0,
                   pooled: bool = False, perturb_adapters: float = 0.1) -> GradCheckResult:
    """Compare autograd against central differences of the answer loss.

    Runs on a float64 copy of ``model``. Adapters are enabled and their
    zero-initialised factor is set to small random values, so the low-rank
    paths carry gradient to both factors.
    """
    m = copy.deepcopy(model).double()
    m.set_adapters(True)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for a in m.adapters():
            a.lora_b.copy_(torch.randn(a.lora_b.shape, generator=g, dtype=torch.float64) * perturb_adapters)
    batch = collate(samples, m.tokenizer, pooled, torch.float64)
    m.eval()

    def loss_value():
        logits, seq = m(batch)
        return answer_loss(logits, seq, batch.answers)

    for p in m.parameters():
        p.requires_grad_(True)
        p.grad = None
    loss_value().backward()
    named = dict(m.named_parameters())
    probes = _probes(m, count, np.random.default_rng(seed))
    analytic, numeric = [], []
    with torch.no_grad():
        for name, i in probes:
            p = named[name]
            flat = p.view(-1)
            analytic.append(float(p.grad.view(-1)[i]))
            old = float(flat[i])
            flat[i] = old + h
            up = float(loss_value())
            flat[i] = old - h
            down = float(loss_value())
            flat[i] = old
            numeric.append((up - down) / (2 * h))
    return GradCheckResult([n for n, _ in probes], np.array(analytic), np.array(numeric))
