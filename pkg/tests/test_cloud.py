import struct
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcqa.cloud import (
    DegenerateCloudError,
    PlyError,
    PointCloud,
    SampleRecord,
    load_ply,
    normalize,
    octant_of,
    octants,
    read_manifest,
    save_ply,
    write_manifest,
)

CUBE = np.array([[x, y, z] for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)])


def write_ascii(path, lines, props="xyzrgb", count=None):
    head = ["ply", "format ascii 1.0", f"element vertex {len(lines) if count is None else count}"]
    head += [f"property float {a}" for a in "xyz"]
    if "rgb" in props:
        head += [f"property uchar {c}" for c in ("red", "green", "blue")]
    head.append("end_header")
    path.write_text("\n".join(head + lines) + "\n")


# -- load / save ------------------------------------------------------------

def test_ascii_single_vertex(tmp_path):
    p = tmp_path / "one.ply"
    write_ascii(p, ["0 0 0 255 0 0"])
    c = load_ply(p)
    assert len(c) == 1
    assert c.positions.tolist() == [[0.0, 0.0, 0.0]]
    assert c.colors.tolist() == [[255, 0, 0]]


def test_binary_cube_matches_ascii_twin(tmp_path):
    # both files written here with struct / text, independent of save_ply
    col = np.arange(24, dtype=np.uint8).reshape(8, 3)
    body = b"".join(struct.pack("<fffBBB", *p, *c) for p, c in zip(CUBE, col))
    head = ("ply\nformat binary_little_endian 1.0\nelement vertex 8\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
    (tmp_path / "b.ply").write_bytes(head.encode() + body)
    write_ascii(tmp_path / "a.ply", [f"{p[0]:g} {p[1]:g} {p[2]:g} {c[0]} {c[1]} {c[2]}" for p, c in zip(CUBE, col)])
    a, b = load_ply(tmp_path / "a.ply"), load_ply(tmp_path / "b.ply")
    assert a.positions.tobytes() == b.positions.tobytes()
    assert np.array_equal(a.colors, b.colors)
    assert np.array_equal(b.positions, CUBE)


def test_truncated_ascii_reports_truncation(tmp_path):
    p = tmp_path / "t.ply"
    write_ascii(p, ["0 0 0 1 2 3"] * 9, count=10)
    with pytest.raises(PlyError, match="truncated"):
        load_ply(p)


def test_truncated_binary_reports_byte_offset(tmp_path):
    c = PointCloud(np.zeros((10, 3)) + np.arange(10)[:, None])
    p = tmp_path / "t.ply"
    save_ply(c, p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(PlyError, match="byte"):
        load_ply(p)


def test_non_finite_coordinate_named(tmp_path):
    p = tmp_path / "nan.ply"
    write_ascii(p, ["0 0 0", "nan 0 0"], props="xyz")
    with pytest.raises(PlyError, match="line 9"):
        load_ply(p)


@pytest.mark.parametrize("header,msg", [
    ("plx\n", "magic"),
    ("ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n", "format"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n", "'z'"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty float y\nproperty float z\nend_header\n",
     "float or double"),
])
def test_malformed_headers(tmp_path, header, msg):
    p = tmp_path / "bad.ply"
    p.write_text(header + "0 0 0\n")
    with pytest.raises(PlyError, match=msg):
        load_ply(p)


def test_unknown_properties_are_skipped(tmp_path):
    p = tmp_path / "extra.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float nx\n"
                 "property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n"
                 "property uchar blue\nproperty float alpha\nend_header\n"
                 "1 9 2 3 10 20 30 0.5\n4 9 5 6 40 50 60 0.5\n")
    c = load_ply(p)
    assert c.positions.tolist() == [[1, 2, 3], [4, 5, 6]]
    assert c.colors.tolist() == [[10, 20, 30], [40, 50, 60]]


def test_binary_round_trip_bit_exact(tmp_path, cloud_factory):
    c = cloud_factory(500, seed=3)
    save_ply(c, tmp_path / "c.ply")
    d = load_ply(tmp_path / "c.ply")
    assert d.positions.tobytes() == c.positions.tobytes()
    assert d.colors.tobytes() == c.colors.tobytes()


def test_ascii_round_trip_six_digits(tmp_path):
    c = PointCloud(np.array([[0.123456789, -2.5, 1e-3]]))
    save_ply(c, tmp_path / "c.ply", encoding="ascii")
    d = load_ply(tmp_path / "c.ply")
    assert abs(d.positions[0, 0] - 0.123457) <= 1e-6 * 0.123457
    assert np.allclose(d.positions, c.positions, rtol=5e-6, atol=0)  # half a unit in the 6th digit


def test_colorless_round_trip(tmp_path, cloud_factory):
    c = cloud_factory(20, colors=False)
    for enc in ("ascii", "binary-le"):
        save_ply(c, tmp_path / "c.ply", encoding=enc)
        assert b"red" not in (tmp_path / "c.ply").read_bytes()[:400]
        assert load_ply(tmp_path / "c.ply").colors is None


def test_float_precision_output(tmp_path, cloud_factory):
    c = cloud_factory(50)
    save_ply(c, tmp_path / "f.ply", precision="float")
    d = load_ply(tmp_path / "f.ply")
    assert np.array_equal(d.positions, c.positions.astype(np.float32).astype(np.float64))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_binary_round_trip_property(tmp_path_factory, pos):
    p = tmp_path_factory.mktemp("rt") / "c.ply"
    c = PointCloud(pos, (np.abs(pos) % 256).astype(np.uint8))
    save_ply(c, p)
    d = load_ply(p)
    assert d.positions.tobytes() == c.positions.tobytes()
    assert d.colors.tobytes() == c.colors.tobytes()


def test_cloud_invariants():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.inf, 0.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.zeros((3, 3), dtype=np.uint8))


# -- normalize --------------------------------------------------------------

def test_normalize_two_points():
    n = normalize(PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]])))
    assert n.positions.tolist() == [[-1.0, 0, 0], [1.0, 0, 0]]
    assert n.centroid.tolist() == [1.0, 0, 0]
    assert n.radius == 1.0


def test_normalize_degenerate():
    with pytest.raises(DegenerateCloudError):
        normalize(PointCloud(np.ones((5, 3))))


def _hp_stats(pos):
    getcontext().prec = 50
    n = len(pos)
    mean = [sum(Decimal(float(v)) for v in pos[:, a]) / n for a in range(3)]
    norms = [sum(Decimal(float(v)) ** 2 for v in row).sqrt() for row in pos]
    return [abs(float(m)) for m in mean], float(max(norms))


def test_normalize_random_cloud_high_precision(cloud_factory):
    c = cloud_factory(1000, seed=11)
    n = normalize(c)
    means, top = _hp_stats(n.positions)
    assert max(means) <= 1e-9
    assert 1 - 1e-9 <= top <= 1.0
    assert np.array_equal(n.colors, c.colors)


def test_normalize_idempotent_and_invertible(cloud_factory):
    c = cloud_factory(300, seed=5)
    n = normalize(c)
    again = normalize(PointCloud(n.positions))
    assert np.abs(again.positions - n.positions).max() <= 1e-9
    back = n.denormalize()
    assert np.allclose(back, c.positions, rtol=1e-6, atol=1e-12 * np.abs(c.positions).max())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 60), st.just(3)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_normalize_invariants_property(pos):
    if np.ptp(pos, axis=0).max() < 1e-6:
        return
    n = normalize(PointCloud(pos))
    assert np.abs(n.positions.mean(axis=0)).max() <= 1e-9
    top = np.sqrt((n.positions ** 2).sum(axis=1)).max()
    assert 1 - 1e-9 <= top <= 1.0


# -- octants ----------------------------------------------------------------

def test_octant_examples():
    assert octant_of((0.1, -0.2, 0.3)) == 5
    assert octant_of((0.0, 0.0, 0.0)) == 7
    assert sorted(octant_of(p) for p in CUBE) == list(range(8))


def test_octants_partition(cloud_factory):
    c = cloud_factory(2000, seed=2)
    o = octants(c.positions, (0.1, -0.2, 0.0))
    assert o.min() >= 0 and o.max() <= 7
    assert sum((o == k).sum() for k in range(8)) == len(c)
    assert all(octant_of(p, (0.1, -0.2, 0.0)) == k for p, k in zip(c.positions[:200], o[:200]))


# -- manifest ---------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    recs = [SampleRecord("a", 3.5, "a.ply"), SampleRecord("b", 1.0, "b.ply", "geom-gauss:3", {"k": 1})]
    write_manifest(tmp_path / "m.jsonl", recs)
    back = read_manifest(tmp_path / "m.jsonl")
    assert [r.to_dict() for r in back] == [r.to_dict() for r in recs]


def test_manifest_validation():
    with pytest.raises(ValueError):
        SampleRecord("", 1.0, "x.ply")
    with pytest.raises(ValueError):
        SampleRecord("a", float("nan"), "x.ply")
    with pytest.raises(ValueError, match="missing"):
        SampleRecord.from_dict({"content_id": "a", "mos": 1})
