"""Multi-level point sampling: FPS global view, kNN patches, octant cover."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .cloud import NormalizedCloud, octants

KINDS = ("fps-global", "knn-local", "octant-cover")
SCALES = ("full", "half")


@dataclass(frozen=True)
class SamplerConfig:
    n: int = 8192
    s: int = 3
    seed: int = 0
    two_scale: bool = False
    downsample_factor: int = 2

    def __post_init__(self):
        if self.n < 1 or self.s < 1:
            raise ValueError("n and s must be >= 1")
        if self.downsample_factor < 2:
            raise ValueError("downsample_factor must be >= 2")


@dataclass
class PatchSet:
    """``patches`` is s x n x 6: xyz followed by rgb in [0, 1].

    ``indices`` keeps the original cloud index of every patch point.
    """

    patches: np.ndarray
    indices: np.ndarray
    anchors: np.ndarray
    kinds: list
    scales: list
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def s(self) -> int:
        return self.patches.shape[0]

    @property
    def n(self) -> int:
        return self.patches.shape[1]


def rng_for(seed: int, key: str = "") -> np.random.Generator:
    """Generator whose stream depends only on ``(seed, key)``."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.default_rng([int(seed) & (2**64 - 1), int.from_bytes(digest[:8], "little")])


# --------------------------------------------------------------------------
# furthest point sampling


def fps_reference(points: np.ndarray, count: int, first: int) -> np.ndarray:
    """Plain O(N * count) greedy maximin; kept as the oracle for :func:`fps`."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    mind = np.full(n, np.inf)
    out = np.empty(count, dtype=np.int64)
    cur = first
    for t in range(count):
        out[t] = cur
        q = pts[cur]
        dx = pts[:, 0] - q[0]
        dy = pts[:, 1] - q[1]
        dz = pts[:, 2] - q[2]
        np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
        mind[out[: t + 1]] = -1.0
        cur = int(np.argmax(mind))
    return out


@numba.njit(cache=True, nogil=True)
def _spread10(v):
    v = (v | (v << 16)) & 0x030000FF
    v = (v | (v << 8)) & 0x0300F00F
    v = (v | (v << 4)) & 0x030C30C3
    v = (v | (v << 2)) & 0x09249249
    return v


@numba.njit(cache=True, nogil=True)
def _morton_order(pts):
    # stable counting sort of points by their cell on a 64^3 Morton grid
    n = pts.shape[0]
    mn = np.full(3, np.inf)
    mx = np.full(3, -np.inf)
    for i in range(n):
        for a in range(3):
            v = pts[i, a]
            if v < mn[a]:
                mn[a] = v
            if v > mx[a]:
                mx[a] = v
    scale = np.empty(3)
    for a in range(3):
        w = mx[a] - mn[a]
        scale[a] = 63.999 / w if w > 0 else 0.0
    code = np.empty(n, dtype=np.int64)
    for i in range(n):
        cx = np.int64((pts[i, 0] - mn[0]) * scale[0])
        cy = np.int64((pts[i, 1] - mn[1]) * scale[1])
        cz = np.int64((pts[i, 2] - mn[2]) * scale[2])
        code[i] = (_spread10(cx) << 2) | (_spread10(cy) << 1) | _spread10(cz)
    cnt = np.zeros((1 << 18) + 1, dtype=np.int64)
    for i in range(n):
        cnt[code[i] + 1] += 1
    for b in range(1 << 18):
        cnt[b + 1] += cnt[b]
    order = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = code[i]
        order[cnt[k]] = i
        cnt[k] += 1
    return order


def spatial_order(points) -> np.ndarray:
    """Permutation that visits points cell by cell along a Morton curve."""
    return _morton_order(np.ascontiguousarray(getattr(points, "positions", points), dtype=np.float64))


@numba.njit(cache=True, nogil=True)
def _build_tree(pts, leaf_size):
    # Morton-sorted points cut into chunks of ``leaf_size``; a complete binary
    # tree over the chunks gives the hierarchy. Node k has children 2k+1 and
    # 2k+2, so parents always precede children. Each chunk is re-sorted by
    # index so ties resolve to the smaller index.
    n = pts.shape[0]
    order = _morton_order(pts)
    for s0 in range(0, n, leaf_size):
        order[s0:min(s0 + leaf_size, n)].sort()
    c = np.empty((3, n))
    for i in range(n):
        p = order[i]
        c[0, i] = pts[p, 0]
        c[1, i] = pts[p, 1]
        c[2, i] = pts[p, 2]
    nleaf = (n + leaf_size - 1) // leaf_size
    width = 1
    while width < nleaf:
        width *= 2
    nn = 2 * width - 1
    left = np.full(nn, -1, dtype=np.int64)
    right = np.full(nn, -1, dtype=np.int64)
    start = np.empty(nn, dtype=np.int64)
    end = np.empty(nn, dtype=np.int64)
    for j in range(width):
        k = width - 1 + j
        start[k] = min(j * leaf_size, n)
        end[k] = min((j + 1) * leaf_size, n)
    for k in range(width - 2, -1, -1):
        left[k] = 2 * k + 1
        right[k] = 2 * k + 2
        start[k] = start[2 * k + 1]
        end[k] = end[2 * k + 2]
    return order, c, left, right, start, end


@numba.njit(cache=True, nogil=True)
def _box_sqdist(lo, hi, k, qx, qy, qz):
    # squared distance from q to box k; never exceeds the rounded distance to
    # any point inside because every rounding step is monotone
    d = 0.0
    g = lo[k, 0] - qx
    if g > 0.0:
        d += g * g
    else:
        g = qx - hi[k, 0]
        if g > 0.0:
            d += g * g
    g = lo[k, 1] - qy
    if g > 0.0:
        d += g * g
    else:
        g = qy - hi[k, 1]
        if g > 0.0:
            d += g * g
    g = lo[k, 2] - qz
    if g > 0.0:
        d += g * g
    else:
        g = qz - hi[k, 2]
        if g > 0.0:
            d += g * g
    return d


@numba.njit(cache=True, nogil=True)
def _fps_tree(pts, count, first, leaf_size):
    n = pts.shape[0]
    order, c, left, right, start, end = _build_tree(pts, leaf_size)
    nn = left.shape[0]
    xs = c[0]
    ys = c[1]
    zs = c[2]
    slot = np.empty(n, dtype=np.int64)
    for i in range(n):
        slot[order[i]] = i
    mind = np.full(n, np.inf)
    lo = np.empty((nn, 3))
    hi = np.empty((nn, 3))
    vmax = np.full(nn, np.inf)
    amax = np.empty(nn, dtype=np.int64)
    for k in range(nn - 1, -1, -1):
        if left[k] < 0:
            best = n
            lo[k, 0] = np.inf
            lo[k, 1] = np.inf
            lo[k, 2] = np.inf
            hi[k, 0] = -np.inf
            hi[k, 1] = -np.inf
            hi[k, 2] = -np.inf
            for i in range(start[k], end[k]):
                if order[i] < best:
                    best = order[i]
                if xs[i] < lo[k, 0]:
                    lo[k, 0] = xs[i]
                if xs[i] > hi[k, 0]:
                    hi[k, 0] = xs[i]
                if ys[i] < lo[k, 1]:
                    lo[k, 1] = ys[i]
                if ys[i] > hi[k, 1]:
                    hi[k, 1] = ys[i]
                if zs[i] < lo[k, 2]:
                    lo[k, 2] = zs[i]
                if zs[i] > hi[k, 2]:
                    hi[k, 2] = zs[i]
            amax[k] = best
            if start[k] == end[k]:
                vmax[k] = -np.inf
        else:
            a = left[k]
            b = right[k]
            for ax in range(3):
                lo[k, ax] = min(lo[a, ax], lo[b, ax])
                hi[k, ax] = max(hi[a, ax], hi[b, ax])
            amax[k] = min(amax[a], amax[b])
            vmax[k] = max(vmax[a], vmax[b])

    out = np.empty(count, dtype=np.int64)
    stack = np.empty(256, dtype=np.int64)
    visited = np.empty(nn, dtype=np.int64)
    cur = first
    for t in range(count):
        out[t] = cur
        qx = pts[cur, 0]
        qy = pts[cur, 1]
        qz = pts[cur, 2]
        cs = slot[cur]
        mind[cs] = -1.0
        nvis = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            k = stack[top]
            contains = start[k] <= cs and cs < end[k]
            if not contains and _box_sqdist(lo, hi, k, qx, qy, qz) >= vmax[k]:
                continue
            if left[k] >= 0:
                visited[nvis] = k
                nvis += 1
                stack[top] = left[k]
                stack[top + 1] = right[k]
                top += 2
                continue
            nm = -np.inf
            ni = start[k]
            for i in range(start[k], end[k]):
                dx = xs[i] - qx
                dy = ys[i] - qy
                dz = zs[i] - qz
                dd = dx * dx + dy * dy + dz * dz
                v = mind[i]
                if dd < v:
                    v = dd
                    mind[i] = dd
                if v > nm:
                    nm = v
                    ni = i
            vmax[k] = nm
            amax[k] = order[ni]
        # parents precede children in visit order, so walk it backwards
        for j in range(nvis - 1, -1, -1):
            k = visited[j]
            a = left[k]
            b = right[k]
            if vmax[a] > vmax[b] or (vmax[a] == vmax[b] and amax[a] < amax[b]):
                vmax[k] = vmax[a]
                amax[k] = amax[a]
            else:
                vmax[k] = vmax[b]
                amax[k] = amax[b]
        cur = amax[0]
    return out


def fps(cloud, count: int, seed: int = 0, first: int | None = None, leaf_size: int = 64) -> np.ndarray:
    """Greedy furthest point sampling.

    The first index is drawn uniformly from ``seed`` unless ``first`` is given;
    each later pick maximises the squared distance to the picked set, ties to
    the smaller index. Returns exactly what :func:`fps_reference` returns.
    """
    pts = np.ascontiguousarray(getattr(cloud, "positions", cloud), dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= count <= n:
        raise ValueError(f"fps count must be in [1, {n}], got {count}")
    if first is None:
        first = int(np.random.default_rng(seed).integers(n))
    if not 0 <= first < n:
        raise ValueError(f"first index {first} out of range")
    return _fps_tree(pts, count, first, leaf_size)


# --------------------------------------------------------------------------
# k nearest neighbours


@numba.njit(cache=True, nogil=True)
def _sq_dist(points, qx, qy, qz):
    out = np.empty(points.shape[0])
    for i in range(points.shape[0]):
        dx = points[i, 0] - qx
        dy = points[i, 1] - qy
        dz = points[i, 2] - qz
        out[i] = dx * dx + dy * dy + dz * dz
    return out


def sq_dist_to(points: np.ndarray, q) -> np.ndarray:
    """Squared distances from every row of ``points`` to ``q``."""
    return _sq_dist(np.ascontiguousarray(points, dtype=np.float64), float(q[0]), float(q[1]), float(q[2]))


def k_smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest entries of ``d`` sorted by (value, index)."""
    n = d.shape[0]
    if k == n:
        return np.argsort(d, kind="stable")
    v = np.partition(d, k - 1)[k - 1]
    below = np.flatnonzero(d < v)
    tied = np.flatnonzero(d == v)[: k - below.size]
    idx = np.concatenate([below, tied])
    return idx[np.lexsort((idx, d[idx]))]


def knn_patch(cloud, anchor_index: int, k: int) -> np.ndarray:
    """Exact k nearest neighbours of point ``anchor_index`` (itself included)."""
    pts = getattr(cloud, "positions", cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not 0 <= anchor_index < n:
        raise ValueError(f"anchor index {anchor_index} out of range")
    d = sq_dist_to(pts, pts[anchor_index])
    return k_smallest(d, k)


# --------------------------------------------------------------------------
# patch sets


def _features(cloud: NormalizedCloud, idx: np.ndarray) -> np.ndarray:
    out = np.empty((idx.size, 6), dtype=np.float64)
    out[:, :3] = cloud.positions[idx]
    if cloud.colors is None:
        out[:, 3:] = 200.0 / 255.0
    else:
        out[:, 3:] = cloud.colors[idx] / 255.0
    return out


def _assemble(cloud, groups, anchors, kinds, scales, seed, **meta) -> PatchSet:
    idx = np.stack(groups).astype(np.int64)
    patches = np.stack([_features(cloud, g) for g in groups])
    return PatchSet(patches, idx, np.asarray(anchors, dtype=np.float64), list(kinds), list(scales), seed, meta)


def sample_patches(cloud: NormalizedCloud, config: SamplerConfig = SamplerConfig()) -> PatchSet:
    """FPS global view plus ``s - 1`` random kNN patches."""
    if config.two_scale:
        return sample_two_scale(cloud, config)
    n = len(cloud)
    if n < config.n:
        raise ValueError(f"cloud has {n} points, fewer than patch size {config.n}")
    rng = rng_for(config.seed, cloud.source_id)
    first = int(rng.integers(n))
    g = fps(cloud, config.n, first=first)
    groups = [g]
    anchors = [cloud.positions[g].mean(axis=0)]
    for _ in range(config.s - 1):
        a = int(rng.integers(n))
        groups.append(knn_patch(cloud, a, config.n))
        anchors.append(cloud.positions[a])
    kinds = ["fps-global"] + ["knn-local"] * (config.s - 1)
    return _assemble(cloud, groups, anchors, kinds, ["full"] * config.s, config.seed)


def downsample_indices(n_points: int, factor: int) -> np.ndarray:
    return np.arange(0, n_points, factor)


def sample_two_scale(cloud: NormalizedCloud, config: SamplerConfig = SamplerConfig()) -> PatchSet:
    """Like :func:`sample_patches`, but the second half of the local patches
    come from every ``downsample_factor``-th point of the cloud."""
    n = len(cloud)
    keep = downsample_indices(n, config.downsample_factor)
    if keep.size < config.n:
        raise ValueError(
            f"downsampled cloud has {keep.size} points, fewer than patch size {config.n}"
        )
    rng = rng_for(config.seed, cloud.source_id)
    first = int(rng.integers(n))
    g = fps(cloud, config.n, first=first)
    groups = [g]
    anchors = [cloud.positions[g].mean(axis=0)]
    scales = ["full"]
    local = config.s - 1
    n_full = (local + 1) // 2
    sub = cloud.positions[keep]
    for j in range(local):
        if j < n_full:
            a = int(rng.integers(n))
            groups.append(knn_patch(cloud, a, config.n))
            anchors.append(cloud.positions[a])
            scales.append("full")
        else:
            a = int(rng.integers(keep.size))
            groups.append(keep[knn_patch(sub, a, config.n)])
            anchors.append(sub[a])
            scales.append("half")
    kinds = ["fps-global"] + ["knn-local"] * local
    return _assemble(cloud, groups, anchors, kinds, scales, config.seed,
                     downsample_factor=config.downsample_factor)


def octant_targets() -> np.ndarray:
    signs = np.array([[(o >> 2) & 1, (o >> 1) & 1, o & 1] for o in range(8)], dtype=np.float64)
    return (signs * 2.0 - 1.0) * 0.5


def octant_cover_patches(cloud: NormalizedCloud, k: int) -> PatchSet:
    """One kNN patch per octant of the normalized frame, patch ``o`` for octant ``o``.

    Occupied octant: the anchor is the member nearest the members' centroid.
    Empty octant: the anchor is the cloud point nearest (+-1/2, +-1/2, +-1/2).
    """
    pts = cloud.positions
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    oct_ = octants(pts)
    targets = octant_targets()
    groups, anchors, empty = [], [], []
    for o in range(8):
        members = np.flatnonzero(oct_ == o)
        if members.size:
            c = pts[members].mean(axis=0)
            a = int(members[np.argmin(sq_dist_to(pts[members], c))])
        else:
            a = int(np.argmin(sq_dist_to(pts, targets[o])))
            empty.append(o)
        groups.append(knn_patch(cloud, a, k))
        anchors.append(pts[a])
    return _assemble(cloud, groups, anchors, ["octant-cover"] * 8, ["full"] * 8, 0,
                     empty_octants=empty)


def coverage_fraction(cloud, patchset: PatchSet) -> float:
    n = len(cloud)
    return np.unique(patchset.indices).size / n


# --------------------------------------------------------------------------
# serialization: raw little-endian float32 tensor + JSON sidecar


def save_patchset(ps: PatchSet, path) -> Path:
    path = Path(path)
    ps.patches.astype("<f4").tofile(path)
    side = {
        "shape": list(ps.patches.shape),
        "dtype": "float32",
        "kinds": ps.kinds,
        "scales": ps.scales,
        "anchors": ps.anchors.tolist(),
        "seed": int(ps.seed),
        "indices_file": path.name + ".idx",
    }
    side.update({k: v for k, v in ps.meta.items()})
    ps.indices.astype("<i8").tofile(path.with_name(path.name + ".idx"))
    with open(path.with_name(path.name + ".json"), "w") as f:
        json.dump(side, f, indent=1, sort_keys=True)
    return path


def load_patchset(path) -> PatchSet:
    path = Path(path)
    with open(path.with_name(path.name + ".json")) as f:
        side = json.load(f)
    shape = tuple(side.pop("shape"))
    side.pop("dtype")
    patches = np.fromfile(path, dtype="<f4").reshape(shape).astype(np.float64)
    idx_file = path.with_name(side.pop("indices_file"))
    indices = np.fromfile(idx_file, dtype="<i8").reshape(shape[:2])
    return PatchSet(
        patches, indices, np.asarray(side.pop("anchors")), side.pop("kinds"),
        side.pop("scales"), side.pop("seed"), side,
    )


def sampled_fraction_nominal(n_points: int, config: SamplerConfig = SamplerConfig()) -> float:
    """s * n / N, the budget when no two patches share a point."""
    return config.s * config.n / n_points


__all__ = [
    "SamplerConfig", "PatchSet", "fps", "fps_reference", "knn_patch", "sample_patches",
    "sample_two_scale", "octant_cover_patches", "coverage_fraction", "save_patchset",
    "load_patchset", "rng_for",
]
