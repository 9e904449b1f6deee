"""Three tiny procedurally generated clouds with a manifest and a smoke config.

``regenerate()`` rebuilds the shipped files byte for byte.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

FIXTURE_DIR = Path(__file__).resolve().parent
MANIFEST = FIXTURE_DIR / "manifest.jsonl"
SMOKE_CONFIG = FIXTURE_DIR / "smoke.cfg"

_SPECS = (("sphere", "red", 4.5), ("cube", "blue", 3.2), ("torus", "green", 1.8))
N_POINTS = 1200


def regenerate(out_dir=FIXTURE_DIR, seed: int = 7) -> Path:
    from ..cloud import PointCloud, save_ply, write_jsonl
    from ..toy.data import make_shape

    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    rows = []
    for kind, color, mos in _SPECS:
        c = make_shape(kind, N_POINTS, rng, color, rotate=False, source_id=kind)
        c = PointCloud(c.positions.astype(np.float32).astype(np.float64), c.colors, kind)
        save_ply(c, out_dir / f"{kind}.ply", precision="float")
        rows.append({"content_id": kind, "mos": mos, "cloud_path": f"{kind}.ply", "distortion_meta": None})
    write_jsonl(out_dir / "manifest.jsonl", rows)
    return out_dir / "manifest.jsonl"
