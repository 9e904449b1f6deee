"""Point-cloud containers, PLY I/O, normalization and octant geometry."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numba
import numpy as np


class PlyError(ValueError):
    """Raised for malformed or unsupported PLY files."""


class DegenerateCloudError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    source_id: str = ""

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(pos).all():
            raise ValueError("positions contain non-finite values")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.ascontiguousarray(self.colors)
            if col.shape != pos.shape:
                raise ValueError(f"colors shape {col.shape} does not match positions {pos.shape}")
            if col.dtype != np.uint8:
                if col.min() < 0 or col.max() > 255:
                    raise ValueError("colors must be 8-bit channel values")
                col = col.astype(np.uint8)
            col.setflags(write=False)
            object.__setattr__(self, "colors", col)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    def subset(self, index: np.ndarray, source_id: Optional[str] = None) -> "PointCloud":
        return PointCloud(
            self.positions[index],
            None if self.colors is None else self.colors[index],
            self.source_id if source_id is None else source_id,
        )


@dataclass(frozen=True)
class NormalizedCloud:
    """Cloud mapped to zero mean and unit maximum distance from the mean.

    ``centroid`` and ``radius`` record the forward map so that
    ``original = positions * radius + centroid``.
    """

    positions: np.ndarray
    colors: Optional[np.ndarray]
    source_id: str
    centroid: np.ndarray
    radius: float

    def __len__(self):
        return self.positions.shape[0]

    def denormalize(self) -> np.ndarray:
        return self.positions * self.radius + self.centroid


@numba.njit(cache=True, nogil=True)
def _center_scale(pos):
    n = pos.shape[0]
    c = np.zeros(3)
    for i in range(n):
        for a in range(3):
            c[a] += pos[i, a]
    for a in range(3):
        c[a] /= n
    r2 = 0.0
    for i in range(n):
        dx = pos[i, 0] - c[0]
        dy = pos[i, 1] - c[1]
        dz = pos[i, 2] - c[2]
        d = dx * dx + dy * dy + dz * dz
        if d > r2:
            r2 = d
    radius = np.sqrt(r2)
    out = np.empty((n, 3))
    if radius == 0.0:
        return out, c, radius
    top = 0.0
    for i in range(n):
        for a in range(3):
            out[i, a] = (pos[i, a] - c[a]) / radius
        d = out[i, 0] * out[i, 0] + out[i, 1] * out[i, 1] + out[i, 2] * out[i, 2]
        if d > top:
            top = d
    # rounding can leave the farthest point a few ulps past 1
    while np.sqrt(top) > 1.0:
        top = 0.0
        for i in range(n):
            for a in range(3):
                out[i, a] *= 1.0 - 2.0 ** -52
            d = out[i, 0] * out[i, 0] + out[i, 1] * out[i, 1] + out[i, 2] * out[i, 2]
            if d > top:
                top = d
    return out, c, radius


def normalize(cloud: PointCloud) -> NormalizedCloud:
    out, centroid, radius = _center_scale(cloud.positions)
    if radius == 0.0:
        raise DegenerateCloudError(f"all points of {cloud.source_id or 'cloud'} coincide")
    out.setflags(write=False)
    return NormalizedCloud(out, cloud.colors, cloud.source_id, centroid, float(radius))


def octant_of(point, center=(0.0, 0.0, 0.0)) -> int:
    p = np.asarray(point, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    return int(p[0] >= c[0]) * 4 + int(p[1] >= c[1]) * 2 + int(p[2] >= c[2])


def octants(positions: np.ndarray, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Vectorised :func:`octant_of` for an N x 3 array."""
    ge = np.asarray(positions) >= np.asarray(center, dtype=np.float64)
    return (ge[:, 0] * 4 + ge[:, 1] * 2 + ge[:, 2]).astype(np.int64)


# --------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _Header:
    fmt: str
    count: int
    props: list = field(default_factory=list)  # (name, numpy type code)
    body_offset: int = 0
    header_lines: int = 0


def _parse_header(f) -> _Header:
    magic = f.readline()
    if magic.strip() != b"ply":
        raise PlyError("missing 'ply' magic line")
    fmt = None
    count = None
    props = []
    element = None
    seen_vertex = False
    n_lines = 1
    while True:
        raw = f.readline()
        n_lines += 1
        if not raw:
            raise PlyError("header ended before end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported PLY format: {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyError(f"bad element line: {line!r}")
            element = tok[1]
            if element == "vertex":
                try:
                    count = int(tok[2])
                except ValueError:
                    raise PlyError(f"bad vertex count: {line!r}") from None
                seen_vertex = True
            elif not seen_vertex:
                raise PlyError(f"element {element!r} before vertex is not supported")
        elif tok[0] == "property":
            if element != "vertex":
                continue
            if tok[1] == "list":
                raise PlyError("list properties on vertices are not supported")
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyError(f"bad property line: {line!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
        else:
            raise PlyError(f"unexpected header line: {line!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    if count is None:
        raise PlyError("header declares no vertex element")
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex property {axis!r} missing")
        if dict(props)[axis] not in ("f4", "f8"):
            raise PlyError(f"vertex property {axis!r} must be float or double")
    rgb = [c in names for c in ("red", "green", "blue")]
    if any(rgb) and not all(rgb):
        raise PlyError("partial color properties")
    if all(rgb) and any(dict(props)[c] != "u1" for c in ("red", "green", "blue")):
        raise PlyError("color properties must be uchar")
    return _Header(fmt, count, props, f.tell(), n_lines)


def load_ply(path) -> PointCloud:
    path = Path(path)
    with open(path, "rb") as f:
        header = _parse_header(f)
        names = [p[0] for p in header.props]
        has_color = "red" in names
        if header.fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + t) for n, t in header.props])
            raw = f.read(dtype.itemsize * header.count)
            got = len(raw) // dtype.itemsize
            if got < header.count:
                raise PlyError(
                    f"{path}: truncated body at byte {header.body_offset + len(raw)}: "
                    f"declared {header.count} vertices, found {got}"
                )
            rec = np.frombuffer(raw, dtype=dtype, count=header.count)
            pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            bad = np.flatnonzero(~np.isfinite(pos).all(axis=1))
            if bad.size:
                off = header.body_offset + int(bad[0]) * dtype.itemsize
                raise PlyError(f"{path}: non-finite coordinate in vertex {bad[0]} at byte {off}")
            col = None
            if has_color:
                col = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.uint8)
        else:
            pos, col = _read_ascii_body(f, header, path, has_color)
    return PointCloud(pos, col, source_id=path.stem)


def _read_ascii_body(f, header, path, has_color):
    names = [p[0] for p in header.props]
    ix = [names.index(a) for a in "xyz"]
    ic = [names.index(c) for c in ("red", "green", "blue")] if has_color else []
    pos = np.empty((header.count, 3), dtype=np.float64)
    col = np.empty((header.count, 3), dtype=np.uint8) if has_color else None
    line_no = header.header_lines
    for i in range(header.count):
        raw = f.readline()
        line_no += 1
        while raw and not raw.strip():
            raw = f.readline()
            line_no += 1
        if not raw:
            raise PlyError(
                f"{path}: truncated body at line {line_no}: declared {header.count} vertices, found {i}"
            )
        tok = raw.split()
        if len(tok) < len(names):
            raise PlyError(f"{path}: line {line_no} has {len(tok)} values, expected {len(names)}")
        try:
            xyz = [float(tok[j]) for j in ix]
        except ValueError:
            raise PlyError(f"{path}: unparsable coordinate at line {line_no}") from None
        if not all(math.isfinite(v) for v in xyz):
            raise PlyError(f"{path}: non-finite coordinate at line {line_no}")
        pos[i] = xyz
        if has_color:
            try:
                rgb = [int(tok[j]) for j in ic]
            except ValueError:
                raise PlyError(f"{path}: unparsable color at line {line_no}") from None
            if any(v < 0 or v > 255 for v in rgb):
                raise PlyError(f"{path}: color out of range at line {line_no}")
            col[i] = rgb
    return pos, col



def save_ply(cloud: PointCloud, path, encoding: str = "binary-le", precision: str = "double") -> None:
    """Write ``cloud`` as PLY.

    Binary output stores doubles by default so positions round-trip
    bit-exactly; ``precision="float"`` halves the size. ASCII output keeps 6
    significant digits.
    """
    if encoding not in ("ascii", "binary-le"):
        raise ValueError(f"unknown PLY encoding {encoding!r}")
    if precision not in ("double", "float"):
        raise ValueError(f"unknown precision {precision!r}")
    n = len(cloud)
    ptype = precision if encoding == "binary-le" else "float"
    lines = [
        "ply",
        "format " + ("ascii 1.0" if encoding == "ascii" else "binary_little_endian 1.0"),
        f"element vertex {n}",
        f"property {ptype} x",
        f"property {ptype} y",
        f"property {ptype} z",
    ]
    if cloud.has_colors:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        if encoding == "binary-le":
            code = "<f8" if precision == "double" else "<f4"
            fields = [("x", code), ("y", code), ("z", code)]
            if cloud.has_colors:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(n, dtype=fields)
            rec["x"], rec["y"], rec["z"] = cloud.positions.T
            if cloud.has_colors:
                rec["red"], rec["green"], rec["blue"] = cloud.colors.T
            f.write(rec.tobytes())
        else:
            if cloud.has_colors:
                rows = (
                    f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {c[0]} {c[1]} {c[2]}\n"
                    for p, c in zip(cloud.positions.tolist(), cloud.colors.tolist())
                )
            else:
                rows = (f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g}\n" for p in cloud.positions.tolist())
            f.write("".join(rows).encode("ascii"))


# --------------------------------------------------------------------------
# manifests


@dataclass
class SampleRecord:
    content_id: str
    mos: float
    cloud_path: str
    distortion_meta: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.content_id:
            raise ValueError("content_id must be non-empty")
        self.mos = float(self.mos)
        if not math.isfinite(self.mos):
            raise ValueError(f"mos must be finite, got {self.mos}")

    def to_dict(self) -> dict:
        d = {
            "content_id": self.content_id,
            "mos": self.mos,
            "cloud_path": self.cloud_path,
            "distortion_meta": self.distortion_meta,
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        d = dict(d)
        known = {k: d.pop(k) for k in ("content_id", "mos", "cloud_path") if k in d}
        missing = {"content_id", "mos", "cloud_path"} - known.keys()
        if missing:
            raise ValueError(f"manifest row missing keys: {sorted(missing)}")
        meta = d.pop("distortion_meta", None)
        return cls(known["content_id"], known["mos"], known["cloud_path"], meta, d)


def read_jsonl(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: {e}") from None
    return rows


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> list:
    return [SampleRecord.from_dict(d) for d in read_jsonl(path)]


def write_manifest(path, records: Iterable[SampleRecord]) -> None:
    write_jsonl(path, (r.to_dict() for r in records))


def resolve(path: str, base) -> Path:
    """Resolve manifest-relative paths against the manifest's directory."""
    p = Path(path)
    return p if p.is_absolute() else Path(base) / p


if sys.byteorder != "little":  # pragma: no cover
    raise ImportError("pcqa assumes a little-endian host")
