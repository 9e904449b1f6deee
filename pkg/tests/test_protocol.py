import json
import math

import numpy as np
import pytest
import torch

from pcqa.protocol import MetricReport, OracleRunner, make_splits, rows_for, run_protocol
from pcqa.toy.model import ToyDims, ToyModel
from pcqa.toy.runner import ToyRunner, subsample_patches, synthetic_quality_rows
from pcqa.toy.settings import TrainConfig

torch.set_num_threads(1)


def manifest(n_contents=25, variants=3, seed=0):
    rng = np.random.default_rng(seed)
    return [{"content_id": f"c{c:02d}", "mos": float(rng.uniform(1, 5)), "variant": v}
            for c in range(n_contents) for v in range(variants)]


def test_ten_contents_split_eight_two():
    plans = make_splits(manifest(10), 5, seed=0)
    assert len(plans) == 5
    for p in plans:
        assert len(p.train) == 8 and len(p.test) == 2


def test_splits_separate_contents():
    m = manifest(25)
    plans = make_splits(m, 5, seed=3)
    assert [p.split_id for p in plans] == [1, 2, 3, 4, 5]
    assert [p.seed for p in plans] == [4, 5, 6, 7, 8]
    for p in plans:
        assert not set(p.train) & set(p.test)
        assert set(p.train) | set(p.test) == {r["content_id"] for r in m}
        assert len(p.train) == 4 * len(p.test)
        test_rows = rows_for(m, p.test)
        assert len(test_rows) == 3 * len(p.test)  # variants travel with their content
        assert not {r["content_id"] for r in rows_for(m, p.train)} & {r["content_id"] for r in test_rows}
    assert len({p.test for p in plans}) > 1


def test_splits_deterministic_and_validated():
    assert make_splits(manifest(12), seed=9) == make_splits(manifest(12), seed=9)
    assert make_splits(manifest(12), seed=9) != make_splits(manifest(12), seed=10)
    with pytest.raises(ValueError):
        make_splits(manifest(4))


def test_oracle_runner_is_perfect():
    m = manifest(25)
    report = run_protocol(OracleRunner(), m, make_splits(m), seeds=range(10))
    assert np.array(report.srocc).shape == (5, 10)
    assert report.srocc_mean == 1.0 and report.plcc_mean == 1.0
    assert all(v == 1.0 for row in report.srocc + report.plcc for v in row)


class SeedIndependent:
    def fit(self, rows):
        return lambda row, seed: row["mos"] ** 2 + (row["variant"] * 0.3)


def test_seed_independent_runner_has_zero_seed_variance():
    m = manifest(25)
    report = run_protocol(SeedIndependent(), m, make_splits(m), seeds=range(10))
    for row in report.srocc + report.plcc:
        assert len(set(row)) == 1  # identical values, zero variance


class Noisy:
    def fit(self, rows):
        def predict(row, seed):
            rng = np.random.default_rng([seed, int(row["content_id"][1:]), row["variant"]])
            return row["mos"] + rng.normal(0, 1.0)
        return predict


def test_means_are_grid_averages():
    m = manifest(25)
    report = run_protocol(Noisy(), m, make_splits(m), seeds=range(10))
    grid = np.array(report.srocc)
    assert abs(report.srocc_mean - grid.mean()) <= 1e-12
    assert abs(report.plcc_mean - np.mean(report.plcc)) <= 1e-12
    assert np.allclose(report.srocc_per_split, grid.mean(axis=1), atol=1e-12)
    assert np.allclose(report.srocc_per_seed, grid.mean(axis=0), atol=1e-12)
    assert np.var(grid, axis=1).max() > 0


def test_parallel_splits_match_serial():
    m = manifest(25)
    plans = make_splits(m)
    a = run_protocol(Noisy(), m, plans, seeds=range(4))
    b = run_protocol(Noisy(), m, plans, seeds=range(4), workers=3)
    assert a.to_dict() == b.to_dict()


class Flaky:
    def fit(self, rows):
        def predict(row, seed):
            if row["content_id"] == "c03" and seed == 1:
                raise RuntimeError("boom")
            return row["mos"]
        return predict


def test_failures_recorded_per_sample():
    m = manifest(25)
    report = run_protocol(Flaky(), m, make_splits(m), seeds=range(3))
    n_tests = sum("c03" in p.test for p in make_splits(m))
    assert len(report.failures) == 3 * n_tests
    assert report.failed
    assert all(f["content_id"] == "c03" and f["seed"] == 1 and "boom" in f["error"] for f in report.failures)


def test_constant_predictions_flagged():
    class Constant:
        def fit(self, rows):
            return lambda row, seed: 3.0

    m = manifest(10)
    report = run_protocol(Constant(), m, make_splits(m, 1), seeds=range(2))
    assert all(math.isnan(v) for v in report.srocc[0])
    assert {f["flag"] for f in report.flags} == {"constant-input"}


def test_logistic_mode():
    m = manifest(25, variants=4)
    report = run_protocol(Noisy(), m, make_splits(m), seeds=range(2), fit="logistic4")
    assert report.fit == "logistic4"
    assert all(-1 <= v <= 1 for row in report.plcc for v in row)


def test_report_round_trip(tmp_path):
    m = manifest(25)
    report = run_protocol(Noisy(), m, make_splits(m), seeds=range(3))
    report.save_json(tmp_path / "r.json")
    back = MetricReport.load_json(tmp_path / "r.json")
    assert back.to_dict() == report.to_dict()
    d = json.loads((tmp_path / "r.json").read_text())
    assert len(d["srocc"]) == 5 and len(d["srocc"][0]) == 3
    report.save_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "split,srocc,plcc" and lines[-1].startswith("mean,") and len(lines) == 7
    assert float(lines[-1].split(",")[1]) == report.srocc_mean


def test_subsample_patches():
    p = np.random.default_rng(0).random((3, 64, 6))
    assert np.array_equal(subsample_patches(p, 64, 1), p.astype(np.float32))
    a = subsample_patches(p, 16, 1)
    assert a.shape == (3, 16, 6)
    assert np.array_equal(a, subsample_patches(p, 16, 1))
    assert not np.array_equal(a, subsample_patches(p, 16, 2))
    for s in range(3):
        rows = {tuple(r) for r in p[s].astype(np.float32)}
        assert all(tuple(r) in rows for r in a[s])
    with pytest.raises(ValueError):
        subsample_patches(p, 65, 0)


@pytest.mark.slow
def test_toy_runner_dry_run_fills_grid():
    dims = ToyDims(n_toy=32)
    rows = synthetic_quality_rows(10, 3, 0, dims, n_points=512)
    assert len({r["content_id"] for r in rows}) == 10
    runner = ToyRunner(ToyModel(dims, 0), TrainConfig(epochs=2, batch_size=8, lr=0.05))
    report = run_protocol(runner, rows, make_splits(rows), seeds=range(10))
    grid = np.array(report.srocc)
    assert grid.shape == (5, 10) and np.array(report.plcc).shape == (5, 10)
    assert np.isfinite(grid).all() and not report.failures
    assert abs(report.srocc_mean - grid.mean()) <= 1e-12
    assert abs(report.plcc_mean - np.mean(report.plcc)) <= 1e-12
    assert len(runner.curves) == 5
    # sampling seeds pick different points, so predictions move with the seed
    assert np.var(grid, axis=1).max() > 0
