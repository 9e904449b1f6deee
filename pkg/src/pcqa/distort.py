"""Synthetic distortion bank and the octant localization set generator."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import PointCloud, load_ply, octants, read_manifest, resolve, save_ply, write_jsonl

log = logging.getLogger(__name__)

DISTORTION_TYPES = ("geom-gauss", "color-gauss", "downsample", "geom-quant", "color-quant")
LEVELS = range(1, 8)

# per-level parameters; geometry values are in units of the cloud's max radius
SEVERITY_TABLE = {
    "geom-gauss": (0.0005, 0.001, 0.002, 0.004, 0.008, 0.016, 0.032),
    "color-gauss": (2, 4, 8, 16, 24, 32, 48),
    "downsample": (0.9, 0.8, 0.65, 0.5, 0.35, 0.2, 0.1),  # keep probability
    "geom-quant": (1 / 512, 1 / 256, 1 / 128, 1 / 64, 1 / 32, 1 / 16, 1 / 8),
    "color-quant": (7, 6, 5, 4, 3, 2, 2),  # bits per channel
}
CLAMP_RADIUS = 1.05


class EmptyOctantError(ValueError):
    pass


def severity_param(dtype: str, severity: int) -> float:
    if dtype not in SEVERITY_TABLE:
        raise ValueError(f"unknown distortion type {dtype!r}")
    if not 1 <= severity <= 7:
        raise ValueError(f"severity must be in 1..7, got {severity}")
    return SEVERITY_TABLE[dtype][severity - 1]


def quantize_channel(values: np.ndarray, bits: int) -> np.ndarray:
    """Floor each 8-bit value to the base of its ``2**(8 - bits)`` wide bucket."""
    shift = 8 - int(bits)
    return ((np.asarray(values, dtype=np.uint8) >> shift) << shift).astype(np.uint8)


def _frame(cloud: PointCloud):
    c = cloud.positions.mean(axis=0)
    d = cloud.positions - c
    r = float(np.sqrt((d * d).sum(axis=1)).max())
    return c, (r if r > 0 else 1.0)


def apply_distortion(
    cloud: PointCloud,
    dtype: str,
    severity: int,
    seed: int,
    mask: Optional[np.ndarray] = None,
    param: Optional[float] = None,
    frame=None,
) -> PointCloud:
    """Distort the masked points of ``cloud`` (all points when ``mask`` is None).

    ``param`` overrides the table value for ``(dtype, severity)``. ``frame`` is
    the ``(centroid, radius)`` that defines normalized units; it defaults to the
    cloud's own.
    """
    p = severity_param(dtype, severity) if param is None else param
    n = len(cloud)
    if mask is None:
        idx = np.arange(n)
    else:
        idx = np.unique(np.asarray(mask, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= n):
            raise IndexError("mask index out of range")
    rng = np.random.default_rng(seed)
    center, radius = _frame(cloud) if frame is None else frame
    pos = np.array(cloud.positions)
    col = None if cloud.colors is None else np.array(cloud.colors)

    if dtype in ("color-gauss", "color-quant") and col is None:
        raise ValueError(f"{dtype} needs a colored cloud")

    if dtype == "geom-gauss":
        if p > 0 and idx.size:
            local = (pos[idx] - center) / radius
            local = local + rng.normal(0.0, p, size=local.shape)
            norm = np.sqrt((local * local).sum(axis=1))
            far = norm > CLAMP_RADIUS
            local[far] *= (CLAMP_RADIUS / norm[far])[:, None]
            pos[idx] = local * radius + center
    elif dtype == "geom-quant":
        if p > 0 and idx.size:
            local = (pos[idx] - center) / radius
            pos[idx] = np.round(local / p) * p * radius + center
    elif dtype == "color-gauss":
        if p > 0 and idx.size:
            noisy = col[idx].astype(np.float64) + rng.normal(0.0, p, size=(idx.size, 3))
            col[idx] = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    elif dtype == "color-quant":
        col[idx] = quantize_channel(col[idx], int(p))
    elif dtype == "downsample":
        drop = idx[rng.random(idx.size) >= p]
        if drop.size == n:
            raise ValueError("downsampling would remove every point")
        keep = np.ones(n, dtype=bool)
        keep[drop] = False
        pos = pos[keep]
        if col is not None:
            col = col[keep]
    else:  # pragma: no cover - severity_param already validated
        raise ValueError(dtype)
    return PointCloud(pos, col, cloud.source_id)


@dataclass
class LocalizationSample:
    cloud: PointCloud
    octant: int
    dtype: str
    severity: int
    seed: int
    pristine_id: str
    mask: Optional[np.ndarray] = None  # pristine indices inside the octant

    def labels(self) -> dict:
        return {
            "pristine_id": self.pristine_id,
            "octant": int(self.octant),
            "dtype": self.dtype,
            "severity": int(self.severity),
            "seed": int(self.seed),
        }


def octant_mask(pristine: PointCloud, octant: int) -> np.ndarray:
    center = pristine.positions.mean(axis=0)
    return np.flatnonzero(octants(pristine.positions, center) == octant)


def make_localization_sample(pristine: PointCloud, octant: int, dtype: str, severity: int,
                             seed: int) -> LocalizationSample:
    if not 0 <= octant <= 7:
        raise ValueError(f"octant must be in 0..7, got {octant}")
    mask = octant_mask(pristine, octant)
    if mask.size == 0:
        raise EmptyOctantError(f"octant {octant} of {pristine.source_id} is empty")
    out = apply_distortion(pristine, dtype, severity, seed, mask=mask, frame=_frame(pristine))
    return LocalizationSample(out, octant, dtype, severity, seed, pristine.source_id, mask)


def derive_seed(seed: int, *parts) -> int:
    h = hashlib.sha256(repr((int(seed),) + tuple(parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") >> 1


def occupied_octants(cloud: PointCloud) -> list:
    center = cloud.positions.mean(axis=0)
    return sorted(set(np.unique(octants(cloud.positions, center)).tolist()))


def draw_labels(rng: np.random.Generator, occupied: list):
    octant = int(occupied[rng.integers(len(occupied))])
    dtype = DISTORTION_TYPES[int(rng.integers(len(DISTORTION_TYPES)))]
    severity = int(rng.integers(1, 8))
    return octant, dtype, severity


def localization_rows(pristines, draws: int, seed: int):
    """Yield ``LocalizationSample`` objects, ``draws`` per pristine cloud.

    Labels are uniform over (occupied octant, type, severity). Each row's
    stream depends only on (seed, pristine_id, row index).
    """
    for cloud in pristines:
        occ = occupied_octants(cloud)
        if len(occ) < 8:
            missing = sorted(set(range(8)) - set(occ))
            log.warning("%s: octants %s are empty and excluded", cloud.source_id, missing)
        colorless = cloud.colors is None
        for row in range(draws):
            s = derive_seed(seed, cloud.source_id, row)
            rng = np.random.default_rng(s)
            octant, dtype, severity = draw_labels(rng, occ)
            if colorless and dtype.startswith("color"):
                # color distortions are undefined without colors; redraw the type
                dtype = ("geom-gauss", "downsample", "geom-quant")[int(rng.integers(3))]
            yield make_localization_sample(cloud, octant, dtype, severity, s)


def build_localization_set(manifest, draws: int, seed: int, out_dir, encoding="binary-le") -> Path:
    """Generate the localization set from a manifest of pristine clouds.

    ``manifest`` is a JSONL path of SampleRecords or a list of PointClouds.
    Writes one PLY per sample and ``localization.jsonl``; returns its path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(manifest, (str, Path)):
        base = Path(manifest).parent
        clouds = []
        for rec in read_manifest(manifest):
            c = load_ply(resolve(rec.cloud_path, base))
            clouds.append(PointCloud(c.positions, c.colors, rec.content_id))
    else:
        clouds = list(manifest)
    if not clouds:
        raise ValueError("need at least one pristine cloud")
    rows = []
    counters = {}
    for sample in localization_rows(clouds, draws, seed):
        k = counters.get(sample.pristine_id, 0)
        counters[sample.pristine_id] = k + 1
        name = f"{sample.pristine_id}_loc{k:05d}.ply"
        save_ply(sample.cloud, out_dir / name, encoding)
        row = sample.labels()
        row["cloud_path"] = name
        rows.append(row)
    path = out_dir / "localization.jsonl"
    write_jsonl(path, rows)
    return path


def regenerate(pristine: PointCloud, row: dict) -> LocalizationSample:
    """Rebuild a sample from its manifest row."""
    return make_localization_sample(pristine, int(row["octant"]), row["dtype"], int(row["severity"]),
                                    int(row["seed"]))


def _rows(cloud: PointCloud) -> np.ndarray:
    """Byte rows of (position, color) for exact comparison."""
    pos = np.ascontiguousarray(cloud.positions, dtype=np.float64).view(np.uint8).reshape(len(cloud), -1)
    if cloud.colors is None:
        return pos
    return np.concatenate([pos, np.ascontiguousarray(cloud.colors, dtype=np.uint8)], axis=1)


def isolation_violations(pristine: PointCloud, sample: LocalizationSample) -> int:
    """Count pristine points outside the labeled octant that are not carried
    over bit-identically, in order, into the distorted cloud.

    Points inside the octant may be changed or dropped; everything else must
    survive untouched. Returns 0 for a clean sample.
    """
    mask = np.zeros(len(pristine), dtype=bool)
    mask[octant_mask(pristine, sample.octant)] = True
    a = _rows(pristine)
    b = _rows(sample.cloud)
    if len(a) == len(b):
        return int((a[~mask] != b[~mask]).any(axis=1).sum())
    # points were removed: greedy subsequence match, skipping only masked rows
    bad = 0
    j = 0
    for i in range(len(a)):
        if j < len(b) and np.array_equal(a[i], b[j]):
            j += 1
        elif not mask[i]:
            bad += 1
    return bad + (len(b) - j)
