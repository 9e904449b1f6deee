"""Six-view software point rasterizer with square splats and a z-buffer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .cloud import NormalizedCloud
from .sampling import spatial_order

VIEW_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")

# (forward, up) per view; the camera sits at -forward * distance
_FORWARD = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.float64
)
_UP = np.array(
    [[0, 1, 0], [0, 1, 0], [0, 0, 1], [0, 0, 1], [0, 1, 0], [0, 1, 0]], dtype=np.float64
)
DEFAULT_POINT_COLOR = (200, 200, 200)


@dataclass(frozen=True)
class RenderConfig:
    height: int = 512
    width: int = 512
    projection: str = "perspective"
    camera_distance: float = 2.5
    point_size: float = 0.002
    fov_y: float = 45.0
    ortho_half_extent: float = 1.1
    background: tuple = (128, 128, 128)

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("render size must be at least 16x16")
        if self.projection not in ("perspective", "orthographic"):
            raise ValueError(f"unknown projection {self.projection!r}")
        if not self.camera_distance > 1.0:
            raise ValueError("camera_distance must exceed 1 (camera outside the unit sphere)")
        if not self.point_size > 0.0:
            raise ValueError("point_size must be positive")
        if self.projection == "perspective" and not 0.0 < self.fov_y < 180.0:
            raise ValueError("fov_y must be in (0, 180)")
        if not self.ortho_half_extent > 0.0:
            raise ValueError("ortho_half_extent must be positive")
        if len(self.background) != 3 or any(not 0 <= int(c) <= 255 for c in self.background):
            raise ValueError("background must be an 8-bit RGB triple")

    @property
    def perspective(self) -> bool:
        return self.projection == "perspective"


@dataclass
class ViewImage:
    pixels: np.ndarray  # H x W x 3 uint8
    view_id: int
    depth: np.ndarray  # H x W float64, inf where empty

    @property
    def name(self) -> str:
        return VIEW_NAMES[self.view_id]


def camera_basis(view_id: int):
    """(forward, up, right) unit vectors for one of the six views."""
    f = _FORWARD[view_id]
    u = _UP[view_id]
    return f, u, np.cross(f, u)


def pixel_footprint(depth: float, config: RenderConfig) -> float:
    if config.perspective:
        return (2.0 * math.tan(math.radians(config.fov_y) / 2.0) / config.height) * depth
    return 2.0 * config.ortho_half_extent / config.height


def splat_size_px(depth: float, config: RenderConfig) -> int:
    if config.perspective and not depth > 0:
        raise ValueError("perspective splat size needs a positive depth")
    side = math.ceil(config.point_size / pixel_footprint(depth, config))
    return int(min(max(side, 1), config.height))


@numba.njit(cache=True, nogil=True)
def _render_view(pos, col, ids, f, u, r, dist, h, w, persp, tan_half, half_ext, size, bg):
    zbuf = np.full((h, w), np.inf)
    win = np.full((h, w), -1, dtype=np.int64)  # slot in ``pos`` of the visible point
    hh = h // 2
    hw = w // 2
    if persp:
        scale = hh / tan_half
        foot_k = 2.0 * tan_half / h
        # nearest possible depth for a point inside the unit ball
        max_side = math.ceil(size / (foot_k * (dist - 1.0)))
    else:
        scale = hh / half_ext
        foot_k = 2.0 * half_ext / h
        max_side = math.ceil(size / foot_k)
    single = max_side <= 1
    for j in range(pos.shape[0]):
        # camera at -f * dist
        px = pos[j, 0] + f[0] * dist
        py = pos[j, 1] + f[1] * dist
        pz = pos[j, 2] + f[2] * dist
        z = px * f[0] + py * f[1] + pz * f[2]
        if persp and z <= 1e-9:
            continue
        xc = px * r[0] + py * r[1] + pz * r[2]
        yc = px * u[0] + py * u[1] + pz * u[2]
        if persp:
            k = scale / z
        else:
            k = scale
        su = xc * k
        sv = yc * k
        # mirror-symmetric pixel assignment about the image centre; truncation
        # is floor here because the operands are non-negative
        if su >= 0.0:
            cx = hw + np.int64(su)
        else:
            cx = hw - 1 - np.int64(-su)
        if sv > 0.0:
            cy = hh - 1 - np.int64(sv)
        else:
            cy = hh + np.int64(-sv)
        if single:
            if cx < 0 or cx >= w or cy < 0 or cy >= h:
                continue
            zc = zbuf[cy, cx]
            # exact depth ties go to the smaller index whatever the visit order
            if z < zc or (z == zc and ids[j] < ids[win[cy, cx]]):
                zbuf[cy, cx] = z
                win[cy, cx] = j
            continue
        if persp:
            side = np.int64(math.ceil(size / (foot_k * z)))
        else:
            side = np.int64(max_side)
        if side < 1:
            side = 1
        if side > h:
            side = h
        # even sides lean away from the image centre so mirrored points get
        # mirrored blocks
        if su >= 0.0:
            x0 = cx - (side - 1) // 2
        else:
            x0 = cx - side // 2
        if sv > 0.0:
            y0 = cy - side // 2
        else:
            y0 = cy - (side - 1) // 2
        for yy in range(max(y0, 0), min(y0 + side, h)):
            for xx in range(max(x0, 0), min(x0 + side, w)):
                zc = zbuf[yy, xx]
                if z < zc or (z == zc and ids[j] < ids[win[yy, xx]]):
                    zbuf[yy, xx] = z
                    win[yy, xx] = j
    img = np.empty((h, w, 3), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            k = win[y, x]
            if k < 0:
                img[y, x, 0] = bg[0]
                img[y, x, 1] = bg[1]
                img[y, x, 2] = bg[2]
            else:
                img[y, x, 0] = col[k, 0]
                img[y, x, 1] = col[k, 1]
                img[y, x, 2] = col[k, 2]
    return img, zbuf


def _prepare(cloud, order):
    pos = np.ascontiguousarray(getattr(cloud, "positions", cloud), dtype=np.float64)
    colors = getattr(cloud, "colors", None)
    if colors is None:
        colors = np.broadcast_to(np.array(DEFAULT_POINT_COLOR, dtype=np.uint8), pos.shape)
    col = np.ascontiguousarray(colors, dtype=np.uint8)
    if order is None:
        return pos, col, np.arange(pos.shape[0])
    order = np.asarray(order, dtype=np.int64)
    return pos[order], col[order], order


def _render_prepared(prep, view_id, config):
    pos, col, ids = prep
    f, u, r = camera_basis(view_id)
    img, depth = _render_view(
        pos, col, ids, f, u, r, float(config.camera_distance), config.height, config.width,
        config.perspective, math.tan(math.radians(config.fov_y) / 2.0),
        float(config.ortho_half_extent), float(config.point_size),
        np.asarray(config.background, dtype=np.uint8),
    )
    return ViewImage(img, view_id, depth)


def render_view(cloud, view_id: int, config: RenderConfig = RenderConfig(), order=None) -> ViewImage:
    """Render one view. ``order`` only changes the traversal (for cache
    locality); the image does not depend on it."""
    return _render_prepared(_prepare(cloud, order), view_id, config)


def render_views(cloud: NormalizedCloud, config: RenderConfig = RenderConfig(), order=None) -> list:
    """Render the +x, -x, +y, -y, +z, -z views in that order."""
    if order is None and len(cloud) > 65536:
        order = spatial_order(cloud)
    prep = _prepare(cloud, order)
    return [_render_prepared(prep, v, config) for v in range(6)]


def save_views(views, out_dir, sample: str) -> list:
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for v in views:
        p = out_dir / f"{sample}_{v.view_id}.png"
        Image.fromarray(v.pixels, mode="RGB").save(p, optimize=False, compress_level=1)
        paths.append(p)
    return paths


def load_view(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
