import json
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bin_oracle
from pcqa.prompt import (
    CONTEXTS,
    IMG,
    LSPCQA_RENDER,
    LSPCQA_SETUP,
    P_END,
    P_START,
    PTS,
    QUESTION,
    LikertLevel,
    MosRange,
    answer_text,
    assemble_prompt,
    build_instruction_dataset,
    dequantize,
    discretize,
)


def test_levels_bijection():
    assert [lv.word for lv in LikertLevel] == ["bad", "poor", "fair", "good", "excellent"]
    assert all(LikertLevel.from_word(lv.word) is lv for lv in LikertLevel)


def test_discretize_examples():
    assert discretize(5.0, MosRange(1, 5)) == LikertLevel.EXCELLENT
    assert discretize(5.0, MosRange(0, 10)) == LikertLevel.FAIR
    assert discretize(2.2, MosRange(1, 5)) == LikertLevel.POOR
    assert bin_oracle(2.2, 1, 5) == 2


def test_discretize_clamps_with_warning():
    with pytest.warns(UserWarning, match="clamping"):
        assert discretize(7.0, MosRange(1, 5)) == 5
    with pytest.warns(UserWarning):
        assert discretize(-1.0, MosRange(1, 5)) == 1


def test_invalid_range():
    with pytest.raises(ValueError):
        MosRange(5, 5)
    with pytest.raises(ValueError):
        discretize(float("nan"), MosRange(1, 5))


@settings(max_examples=300, deadline=None)
@given(lo=st.floats(-100, 100), width=st.floats(0.01, 200), t=st.floats(0, 1))
def test_discretize_matches_exact_oracle(lo, width, t):
    hi = lo + width
    mos = min(lo + t * width, hi)
    assert discretize(mos, MosRange(lo, hi)) == bin_oracle(mos, lo, hi)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(1, 5), b=st.floats(1, 5))
def test_discretize_monotone(a, b):
    a, b = sorted((a, b))
    assert discretize(a, MosRange(1, 5)) <= discretize(b, MosRange(1, 5))


def test_dequantize_examples():
    assert dequantize([0, 0, 0, 1, 0]) == 4.0
    assert dequantize([0.2] * 5) == pytest.approx(3.0)
    assert dequantize([0, 0, 0, 0.5, 0.5]) == 4.5


@pytest.mark.parametrize("bad", [[0.5, 0.5, 0.1, 0, 0], [-0.1, 0.3, 0.3, 0.3, 0.2], [1, 0, 0, 0], [np.nan] * 5])
def test_dequantize_rejects_non_simplex(bad):
    with pytest.raises(ValueError):
        dequantize(bad)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), i=st.integers(0, 3), gap=st.integers(1, 4), frac=st.floats(0.01, 1))
def test_dequantize_mass_shift_increases(seed, i, gap, frac):
    j = min(i + gap, 4)
    p = np.random.default_rng(seed).dirichlet(np.ones(5))
    if p[i] < 1e-9:
        return
    q = p.copy()
    moved = p[i] * frac
    q[i] -= moved
    q[j] += moved
    assert dequantize(q) > dequantize(p)


def test_round_trip_bound_level_scale():
    r = MosRange(1, 5)
    for mos in np.linspace(1, 5, 2001):
        lv = discretize(float(mos), r)
        assert abs(dequantize(np.eye(5)[lv - 1]) - r.to_level_scale(float(mos))) <= 0.5


def test_affine_map_can_exceed_half_bin():
    # the plain affine map onto [1, 5] misses by up to 0.8 at bin edges, hence to_level_scale
    r = MosRange(1, 5)
    mos = 1.8 - 1e-9
    assert abs(int(discretize(mos, r)) - r.to_unit5(mos)) == pytest.approx(0.8, abs=1e-6)


# -- prompts ------------------------------------------------------------------

STRUCTURE = re.compile(r"^.*?(\{IMG\}){6}<p_start>\{PTS\}<p_end> " + re.escape(QUESTION) + r"$", re.S)


def test_base_prompt():
    p = assemble_prompt()
    assert "Can you rate the quality of the point cloud?" in p
    assert STRUCTURE.match(p)
    assert p.count(IMG) == 6 and p.count(P_START) == 1 and p.count(P_END) == 1 and p.count(PTS) == 1


def test_setup_prompt_carries_device_sentence():
    p = assemble_prompt(*CONTEXTS["setup"])
    assert ("The presentation device used in subjective experiments is Dell SE2216H with a 21.5-inch "
            "monitor with a resolution of 1920×1080 pixels.") in p
    assert "The viewing distance is about three times the height" in p
    full = assemble_prompt(*CONTEXTS["full"])
    assert "point size of 2 mm with cameras at 2.5m" in full
    assert full.index(LSPCQA_SETUP) < full.index(LSPCQA_RENDER) < full.index(IMG)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40), st.text(max_size=40))
def test_structure_always_holds(a, b):
    assert STRUCTURE.match(assemble_prompt(a, b))


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=20), st.text(max_size=20), st.text(max_size=20))
def test_injective_per_argument(a, b, fixed):
    if a != b:
        assert assemble_prompt(a, fixed) != assemble_prompt(b, fixed)
        assert assemble_prompt(fixed, a) != assemble_prompt(fixed, b)


def test_named_contexts_distinct():
    prompts = {assemble_prompt(*c) for c in CONTEXTS.values()}
    assert len(prompts) == len(CONTEXTS)


def test_answer_text():
    assert answer_text(LikertLevel.EXCELLENT) == "The quality of the point cloud is excellent."


# -- dataset ------------------------------------------------------------------

def _manifest(tmp_path, mos_values):
    rows = []
    for i, mos in enumerate(mos_values):
        views = []
        for v in range(6):
            p = tmp_path / f"s{i}_{v}.png"
            p.write_bytes(b"x")
            views.append(p.name)
        (tmp_path / f"s{i}.bin").write_bytes(b"x")
        rows.append({"content_id": f"c{i}", "mos": mos, "cloud_path": "x.ply", "view_paths": views,
                     "patch_path": f"s{i}.bin"})
    path = tmp_path / "m.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_one_row_dataset(tmp_path):
    m = _manifest(tmp_path, [3.0])
    out = tmp_path / "inst.jsonl"
    samples = build_instruction_dataset(m, MosRange(1, 5), CONTEXTS["none"], out)
    assert len(samples) == 1
    row = json.loads(out.read_text())
    assert set(row) >= {"prompt", "view_paths", "patch_path", "answer", "mos", "level"}
    assert all(row[k] not in (None, "", []) for k in ("prompt", "view_paths", "patch_path", "answer"))
    assert row["answer"] == "The quality of the point cloud is fair."  # midpoint of [1, 5]
    assert row["level"] == 3 and len(row["view_paths"]) == 6


def test_dataset_deterministic_bytes(tmp_path):
    m = _manifest(tmp_path, [1.0, 2.5, 4.9])
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    build_instruction_dataset(m, MosRange(1, 5), CONTEXTS["full"], a)
    build_instruction_dataset(m, MosRange(1, 5), CONTEXTS["full"], b)
    assert a.read_bytes() == b.read_bytes()


def test_dataset_paths_follow_output_location(tmp_path):
    m = _manifest(tmp_path, [2.0])
    (tmp_path / "sub").mkdir()
    out = tmp_path / "sub" / "inst.jsonl"
    build_instruction_dataset(m, MosRange(1, 5), CONTEXTS["none"], out)
    row = json.loads(out.read_text())
    assert (out.parent / row["patch_path"]).exists()
    assert all((out.parent / v).exists() for v in row["view_paths"])


def test_dataset_missing_files(tmp_path):
    m = _manifest(tmp_path, [2.0])
    (tmp_path / "s0_3.png").unlink()
    with pytest.raises(FileNotFoundError):
        build_instruction_dataset(m, MosRange(1, 5))
