import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import greedy_oracle, knn_oracle
from pcqa.cloud import PointCloud, normalize, octants
from pcqa.sampling import (
    SamplerConfig,
    coverage_fraction,
    fps,
    knn_patch,
    load_patchset,
    octant_cover_patches,
    sample_patches,
    sample_two_scale,
    save_patchset,
)


def cloud(n, seed=0, colors=True):
    r = np.random.default_rng(seed)
    col = r.integers(0, 256, (n, 3), dtype=np.uint8) if colors else None
    return normalize(PointCloud(r.normal(size=(n, 3)), col, f"c{seed}"))


# -- fps ----------------------------------------------------------------------

def test_fps_exhaustion_is_permutation():
    c = cloud(300, 1)
    idx = fps(c, 300, seed=4)
    assert sorted(idx.tolist()) == list(range(300))


def test_fps_square_corners():
    sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    assert fps(sq, 2, first=0).tolist() == [0, 3]


def test_fps_matches_oracle_512():
    c = cloud(512, 7)
    got = fps(c, 64, seed=3)
    assert np.array_equal(got, greedy_oracle(c.positions, 64, int(got[0])))


def test_fps_first_index_is_seeded():
    c = cloud(400, 2)
    firsts = {int(fps(c, 1, seed=s)[0]) for s in range(20)}
    assert len(firsts) > 5
    assert fps(c, 10, seed=9).tolist() == fps(c, 10, seed=9).tolist()


def test_fps_ties_break_to_smaller_index():
    grid = np.array([[x, y, z] for x in range(4) for y in range(4) for z in range(4)], dtype=float)
    got = fps(grid, 20, first=0, leaf_size=4)
    assert np.array_equal(got, greedy_oracle(grid, 20, 0))


def test_fps_errors():
    with pytest.raises(ValueError):
        fps(cloud(10), 11)
    with pytest.raises(ValueError):
        fps(cloud(10), 0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 1024), frac=st.floats(0.01, 1.0), seed=st.integers(0, 2**31),
       dup=st.booleans(), leaf=st.sampled_from([1, 8, 64]))
def test_fps_oracle_property(n, frac, seed, dup, leaf):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 3))
    if dup:  # coarse lattice forces many exact distance ties
        pts = np.round(pts * 2) / 2
    count = max(1, int(frac * n))
    got = fps(pts, count, seed=seed, leaf_size=leaf)
    assert np.array_equal(got, greedy_oracle(pts, count, int(got[0])))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_fps_separation_non_increasing(seed):
    pts = np.random.default_rng(seed).uniform(-1, 1, (200, 3))
    idx = fps(pts, 40, seed=seed)
    sel = pts[idx]
    # min distance of pick t to earlier picks never grows
    gaps = [np.sqrt(((sel[:t] - sel[t]) ** 2).sum(axis=1)).min() for t in range(1, 40)]
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))


# -- knn ----------------------------------------------------------------------

def test_knn_k1_is_anchor():
    c = cloud(50, 3)
    assert knn_patch(c, 17, 1).tolist() == [17]


def test_knn_grid_corner():
    grid = np.array([[x, y, z] for x in range(5) for y in range(5) for z in range(5)], dtype=float)
    got = knn_patch(grid, 0, 4)
    assert sorted(map(tuple, grid[got].astype(int))) == [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0)]


def test_knn_matches_oracle_2000():
    c = cloud(2000, 4)
    assert np.array_equal(knn_patch(c, 123, 128), knn_oracle(c.positions, 123, 128))


def test_knn_errors():
    with pytest.raises(ValueError):
        knn_patch(cloud(10), 0, 11)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 4096), seed=st.integers(0, 2**31), dup=st.booleans())
def test_knn_oracle_property(n, seed, dup):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 3))
    if dup:
        pts = np.round(pts)
    k = int(r.integers(1, min(n, 256) + 1))
    a = int(r.integers(n))
    assert np.array_equal(knn_patch(pts, a, k), knn_oracle(pts, a, k))


# -- patch sets ---------------------------------------------------------------

def test_single_patch_is_fps_view():
    c = cloud(500, 5)
    ps = sample_patches(c, SamplerConfig(n=64, s=1, seed=2))
    assert ps.kinds == ["fps-global"] and ps.patches.shape == (1, 64, 6)
    assert np.array_equal(ps.indices[0], fps(c, 64, first=int(ps.indices[0, 0])))
    assert np.allclose(ps.anchors[0], c.positions[ps.indices[0]].mean(axis=0))


def test_patch_contents():
    c = cloud(800, 6)
    ps = sample_patches(c, SamplerConfig(n=100, s=3, seed=1))
    assert ps.patches.shape == (3, 100, 6)
    assert ps.kinds == ["fps-global", "knn-local", "knn-local"]
    for j in (1, 2):
        a = int(ps.indices[j, 0])  # the anchor is its own nearest neighbour
        assert np.array_equal(ps.indices[j], knn_oracle(c.positions, a, 100))
        assert np.array_equal(ps.anchors[j], c.positions[a])
    assert np.array_equal(ps.patches[..., :3], c.positions[ps.indices])
    assert np.array_equal(ps.patches[..., 3:], c.colors[ps.indices] / 255.0)
    assert 0.0 <= ps.patches[..., 3:].min() and ps.patches[..., 3:].max() <= 1.0


def test_sampling_deterministic_and_bit_identical():
    c = cloud(700, 8)
    cfg = SamplerConfig(n=50, s=4, seed=13)
    a, b = sample_patches(c, cfg), sample_patches(c, cfg)
    assert a.patches.tobytes() == b.patches.tobytes()
    assert np.array_equal(a.indices, b.indices)


def test_sampling_too_small():
    with pytest.raises(ValueError):
        sample_patches(cloud(10), SamplerConfig(n=11))


def test_default_budget_fraction_at_600k():
    cfg = SamplerConfig()
    assert cfg.s * cfg.n / 600_000 == pytest.approx(0.04096)
    assert 0.03 <= cfg.s * cfg.n / 600_000 <= 0.05


def test_colorless_patch_gets_constant_gray():
    ps = sample_patches(cloud(100, colors=False), SamplerConfig(n=10, s=2))
    assert np.all(ps.patches[..., 3:] == 200 / 255)


def test_config_validation():
    for kw in ({"n": 0}, {"s": 0}, {"downsample_factor": 1}):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


# -- two-scale ----------------------------------------------------------------

def test_two_scale_split_rule_and_provenance():
    c = cloud(1000, 9)
    ps = sample_two_scale(c, SamplerConfig(n=80, s=3, seed=4))
    assert ps.kinds == ["fps-global", "knn-local", "knn-local"]
    assert ps.scales == ["full", "full", "half"]
    assert np.all(ps.indices[2] % 2 == 0)
    ps5 = sample_two_scale(c, SamplerConfig(n=80, s=6, seed=4))
    assert ps5.scales == ["full", "full", "full", "full", "half", "half"]


def test_two_scale_half_patch_is_knn_of_decimated_cloud():
    c = cloud(900, 10)
    ps = sample_two_scale(c, SamplerConfig(n=60, s=3, seed=2))
    keep = np.arange(0, 900, 2)
    sub = c.positions[keep]
    a_sub = int(np.flatnonzero(keep == ps.indices[2, 0])[0])
    assert np.array_equal(ps.indices[2], keep[knn_oracle(sub, a_sub, 60)])


def test_two_scale_boundary_exact_half():
    c = cloud(200, 11)
    ps = sample_two_scale(c, SamplerConfig(n=100, s=3, seed=0))
    assert sorted(ps.indices[2].tolist()) == list(range(0, 200, 2))


def test_two_scale_too_small():
    with pytest.raises(ValueError):
        sample_two_scale(cloud(198), SamplerConfig(n=100, s=3))  # 99 points survive


def test_two_scale_flag_routes():
    c = cloud(400, 12)
    cfg = SamplerConfig(n=50, s=3, seed=1, two_scale=True)
    assert sample_patches(c, cfg).scales == ["full", "full", "half"]


# -- octant cover -------------------------------------------------------------

def clusters(per=30, seed=0):
    r = np.random.default_rng(seed)
    centers = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float) * 0.5
    pts = np.concatenate([c + r.normal(0, 0.02, (per, 3)) for c in centers])
    return normalize(PointCloud(pts)), per


def test_octant_cover_clusters():
    c, per = clusters()
    ps = octant_cover_patches(c, per)
    oct_ = octants(c.positions)
    assert ps.kinds == ["octant-cover"] * 8
    for o in range(8):
        assert sorted(ps.indices[o].tolist()) == sorted(np.flatnonzero(oct_ == o).tolist())


def test_octant_cover_single_octant_fallback():
    pts = np.random.default_rng(3).uniform(0.01, 0.6, (300, 3))  # all coordinates positive
    ps = octant_cover_patches(PointCloud(pts), 20)
    assert ps.s == 8 and ps.patches.shape == (8, 20, 6)
    assert ps.meta["empty_octants"] == [0, 1, 2, 3, 4, 5, 6]


def test_octant_cover_anchor_inside_each_occupied_octant():
    c = cloud(3000, 13)
    ps = octant_cover_patches(c, 64)
    for o in range(8):
        assert octants(ps.anchors[o][None])[0] == o


def test_octant_cover_deterministic():
    c = cloud(500, 14)
    a, b = octant_cover_patches(c, 32), octant_cover_patches(c, 32)
    assert a.patches.tobytes() == b.patches.tobytes()


# -- coverage + io ------------------------------------------------------------

def test_coverage_full_and_disjoint():
    c = cloud(300, 15)
    assert coverage_fraction(c, sample_patches(c, SamplerConfig(n=300, s=1))) == 1.0
    pc, per = clusters(per=25)
    ps = octant_cover_patches(pc, per)
    assert coverage_fraction(pc, ps) == 8 * per / len(pc)


def test_patchset_file_round_trip(tmp_path):
    c = cloud(400, 16)
    ps = sample_patches(c, SamplerConfig(n=40, s=3, seed=5))
    save_patchset(ps, tmp_path / "p.bin")
    back = load_patchset(tmp_path / "p.bin")
    assert np.array_equal(back.patches, ps.patches.astype(np.float32))
    assert np.array_equal(back.indices, ps.indices)
    assert back.kinds == ps.kinds and back.scales == ps.scales and back.seed == ps.seed
