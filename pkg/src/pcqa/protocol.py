"""Content-separated splits and the split x seed evaluation grid."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .metrics import MetricWarning, plcc, plcc_fitted, srocc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitPlan:
    split_id: int
    train: tuple
    test: tuple
    seed: int

    def to_dict(self) -> dict:
        return {"split_id": self.split_id, "seed": self.seed, "train": list(self.train), "test": list(self.test)}


def _content_ids(manifest) -> list:
    ids = []
    for row in manifest:
        cid = row["content_id"] if isinstance(row, dict) else row.content_id
        ids.append(cid)
    return ids


def make_splits(manifest, n_splits: int = 5, seed: int = 0) -> list:
    """``n_splits`` seeded 4:1 content splits; split ``k`` shuffles with seed ``seed + k``."""
    contents = sorted(set(_content_ids(manifest)))
    if len(contents) < 5:
        raise ValueError(f"need at least 5 distinct contents, got {len(contents)}")
    n_train = (4 * len(contents)) // 5
    plans = []
    for k in range(1, n_splits + 1):
        order = np.random.default_rng(seed + k).permutation(len(contents))
        shuffled = [contents[i] for i in order]
        plans.append(SplitPlan(k, tuple(sorted(shuffled[:n_train])), tuple(sorted(shuffled[n_train:])), seed + k))
    return plans


def rows_for(manifest, contents) -> list:
    keep = set(contents)
    return [r for r, cid in zip(manifest, _content_ids(manifest)) if cid in keep]


class Runner(Protocol):
    def fit(self, train_rows: list) -> Callable[[object, int], float]:
        """Train on ``train_rows``; return ``predict(row, sampling_seed) -> score``."""


class OracleRunner:
    """Predicts the ground-truth MOS; the protocol's upper bound."""

    def fit(self, train_rows):
        return lambda row, seed: float(row["mos"] if isinstance(row, dict) else row.mos)


@dataclass
class MetricReport:
    srocc: list  # [split][seed]
    plcc: list
    split_ids: list
    seeds: list
    fit: str = "none"
    failures: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @staticmethod
    def _mean(values) -> float:
        return float(np.mean(np.asarray(values, dtype=np.float64)))

    @property
    def srocc_per_split(self) -> list:
        return [self._mean(r) for r in self.srocc]

    @property
    def plcc_per_split(self) -> list:
        return [self._mean(r) for r in self.plcc]

    @property
    def srocc_per_seed(self) -> list:
        return [self._mean(c) for c in zip(*self.srocc)]

    @property
    def plcc_per_seed(self) -> list:
        return [self._mean(c) for c in zip(*self.plcc)]

    @property
    def srocc_mean(self) -> float:
        return self._mean(self.srocc_per_split)

    @property
    def plcc_mean(self) -> float:
        return self._mean(self.plcc_per_split)

    @property
    def failed(self) -> bool:
        return bool(self.failures)

    def to_dict(self) -> dict:
        return {
            "fit": self.fit,
            "split_ids": self.split_ids,
            "seeds": self.seeds,
            "srocc": self.srocc,
            "plcc": self.plcc,
            "srocc_per_split": self.srocc_per_split,
            "plcc_per_split": self.plcc_per_split,
            "srocc_per_seed": self.srocc_per_seed,
            "plcc_per_seed": self.plcc_per_seed,
            "srocc_mean": self.srocc_mean,
            "plcc_mean": self.plcc_mean,
            "failures": self.failures,
            "flags": self.flags,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n")

    def save_csv(self, path) -> None:
        """One row per split plus a final mean row."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["split", "srocc", "plcc"])
            for sid, s, p in zip(self.split_ids, self.srocc_per_split, self.plcc_per_split):
                w.writerow([sid, repr(s), repr(p)])
            w.writerow(["mean", repr(self.srocc_mean), repr(self.plcc_mean)])

    @classmethod
    def load_json(cls, path) -> "MetricReport":
        d = json.loads(Path(path).read_text())
        return cls(d["srocc"], d["plcc"], d["split_ids"], d["seeds"], d.get("fit", "none"),
                   d.get("failures", []), d.get("flags", []))


def _mos(row) -> float:
    return float(row["mos"] if isinstance(row, dict) else row.mos)


def _run_split(runner, manifest, plan, seeds, fit):
    predict = runner.fit(rows_for(manifest, plan.train))
    test_rows = rows_for(manifest, plan.test)
    s_row, p_row, failures, flags = [], [], [], []
    for seed in seeds:
        preds, mos = [], []
        for row in test_rows:
            try:
                preds.append(float(predict(row, seed)))
                mos.append(_mos(row))
            except Exception as e:  # recorded per sample, the grid goes on
                cid = row["content_id"] if isinstance(row, dict) else row.content_id
                failures.append({"split_id": plan.split_id, "seed": seed, "content_id": cid, "error": repr(e)})
        if len(preds) < 3:
            s_row.append(math.nan)
            p_row.append(math.nan)
            continue
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", MetricWarning)
            s_row.append(srocc(preds, mos))
            if fit == "none":
                p_row.append(plcc(preds, mos))
            else:
                value, ok = plcc_fitted(preds, mos)
                p_row.append(value)
                if not ok:
                    flags.append({"split_id": plan.split_id, "seed": seed, "flag": "logistic-fallback"})
        for w in caught:
            if issubclass(w.category, MetricWarning) and "constant" in str(w.message):
                flags.append({"split_id": plan.split_id, "seed": seed, "flag": "constant-input"})
    return s_row, p_row, failures, flags


def run_protocol(runner: Runner, manifest, plans, seeds=range(10), fit: str = "none", workers: int = 1) -> MetricReport:
    """Train once per split, score the test side for every sampling seed."""
    manifest = list(manifest)
    seeds = list(seeds)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda p: _run_split(runner, manifest, p, seeds, fit), plans))
    else:
        results = [_run_split(runner, manifest, p, seeds, fit) for p in plans]
    report = MetricReport([r[0] for r in results], [r[1] for r in results], [p.split_id for p in plans], seeds, fit)
    for r in results:
        report.failures += r[2]
        report.flags += r[3]
    if report.failures:
        log.warning("%d sample predictions failed", len(report.failures))
    return report
