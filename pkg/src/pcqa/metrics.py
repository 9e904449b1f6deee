"""Correlation metrics with tie-aware ranking, optional logistic fitting, and accuracies."""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.optimize import curve_fit
from scipy.stats import rankdata


class MetricWarning(UserWarning):
    pass


def _vectors(pred, mos, min_len):
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(mos, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} predictions vs {y.size} scores")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} samples, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("inputs must be finite")
    return x, y


def pearson(x, y) -> float:
    """Two-pass Pearson correlation; NaN with a warning for a constant input."""
    x, y = _vectors(x, y, 2)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        warnings.warn("correlation undefined for a constant input", MetricWarning, stacklevel=2)
        return math.nan
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def srocc(pred, mos) -> float:
    """Pearson correlation of mid-ranks."""
    x, y = _vectors(pred, mos, 3)
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def logistic4(x, b1, b2, b3, b4):
    return b1 + b2 / (1.0 + np.exp(-(x - b3) / np.abs(b4)))


def fit_logistic4(pred, mos, max_iter: int = 500):
    """Least-squares fit of ``logistic4`` (Levenberg-Marquardt).

    Returns ``(params, converged)``; params is None when the fit failed.
    """
    x, y = _vectors(pred, mos, 4)
    q25, q50, q75 = np.quantile(x, [0.25, 0.5, 0.75])
    scale = (q75 - q25) / 2.0 or float(np.std(x)) or 1.0
    direction = 1.0 if (x - x.mean()) @ (y - y.mean()) >= 0 else -1.0
    lo, hi = float(y.min()), float(y.max())
    p0 = (lo if direction > 0 else hi, direction * (hi - lo or 1.0), q50, scale)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params, _ = curve_fit(logistic4, x, y, p0=p0, method="lm", maxfev=max_iter)
    except (RuntimeError, ValueError):
        return None, False
    if not np.isfinite(params).all():
        return None, False
    return params, True


def plcc(pred, mos, fit: str = "none") -> float:
    """Pearson correlation, raw or after a fitted 4-parameter logistic map."""
    if fit == "none":
        x, y = _vectors(pred, mos, 2)
        return pearson(x, y)
    if fit != "logistic4":
        raise ValueError(f"unknown fit {fit!r}")
    value, _ = plcc_fitted(pred, mos)
    return value


def plcc_fitted(pred, mos):
    """``(plcc, converged)``; falls back to raw Pearson when the fit fails."""
    x, y = _vectors(pred, mos, 4)
    params, ok = fit_logistic4(x, y)
    if not ok:
        warnings.warn("logistic fit did not converge; reporting raw PLCC", MetricWarning, stacklevel=2)
        return pearson(x, y), False
    return pearson(logistic4(x, *params), y), True


def classification_accuracy(preds, labels) -> float:
    preds = list(preds)
    labels = list(labels)
    if len(preds) != len(labels):
        raise ValueError("length mismatch")
    if not labels:
        raise ValueError("empty input")
    return sum(p == t for p, t in zip(preds, labels)) / len(labels)


def localization_scores(pred_octants, pred_types, true_octants, true_types) -> dict:
    """Identification (type), localization (octant) and joint accuracies."""
    joint = classification_accuracy(list(zip(pred_octants, pred_types)), list(zip(true_octants, true_types)))
    return {
        "identification": classification_accuracy(pred_types, true_types),
        "localization": classification_accuracy(pred_octants, true_octants),
        "joint": joint,
    }
