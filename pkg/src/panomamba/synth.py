"""Procedural panorama corpus for desk-scale training.

Scenes are rendered as functions of the per-pixel ray direction (sky/ground
gradient plus colored angular boxes), so the wrap seam is exact by
construction and each scene caption is derivable from its spec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pano import EquirectImage, equirect_dir_grid, wrap_lon
from .tensor import ContractError, Tensor

PALETTES = {
    "warm": {
        "sky_top": (0.95, 0.72, 0.40),
        "sky_horizon": (0.98, 0.88, 0.68),
        "ground": (0.45, 0.30, 0.18),
        "objects": [(0.85, 0.20, 0.15), (0.95, 0.55, 0.10), (0.75, 0.10, 0.35)],
    },
    "cool": {
        "sky_top": (0.25, 0.45, 0.85),
        "sky_horizon": (0.60, 0.80, 0.95),
        "ground": (0.15, 0.30, 0.25),
        "objects": [(0.10, 0.55, 0.80), (0.20, 0.75, 0.65), (0.35, 0.35, 0.90)],
    },
    "gray": {
        "sky_top": (0.55, 0.55, 0.60),
        "sky_horizon": (0.80, 0.80, 0.82),
        "ground": (0.35, 0.35, 0.35),
        "objects": [(0.20, 0.20, 0.22), (0.65, 0.65, 0.68), (0.45, 0.45, 0.50)],
    },
    "vivid": {
        "sky_top": (0.95, 0.30, 0.60),
        "sky_horizon": (0.98, 0.80, 0.40),
        "ground": (0.20, 0.60, 0.30),
        "objects": [(0.95, 0.85, 0.10), (0.10, 0.85, 0.90), (0.90, 0.15, 0.85)],
    },
}


@dataclass(frozen=True)
class SynthSceneSpec:
    seed: int
    palette: str
    horizon_deg: float
    object_count: int

    def caption(self):
        return f"a {self.palette} scene with {self.object_count} boxes"


def random_scene_spec(index, base_seed=0):
    rng = np.random.default_rng([base_seed & 0xFFFFFFFF, index])
    palette = list(PALETTES)[int(rng.integers(0, len(PALETTES)))]
    horizon = float(rng.uniform(-20.0, -5.0))
    count = int(rng.integers(1, 6))
    return SynthSceneSpec(seed=int(rng.integers(0, 2**31)), palette=palette,
                          horizon_deg=horizon, object_count=count)


def synth_panorama(spec, w, h):
    """Render one scene; returns (EquirectImage with all-known mask, caption)."""
    if w != 2 * h:
        raise ContractError(f"panorama needs W == 2H, got {w}x{h}")
    if spec.palette not in PALETTES:
        raise ContractError(f"unknown palette {spec.palette!r}")
    pal = PALETTES[spec.palette]
    rng = np.random.default_rng(spec.seed)

    dirs = equirect_dir_grid(w, h)
    lat = np.degrees(np.arcsin(np.clip(dirs[..., 1], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(dirs[..., 0], dirs[..., 2]))

    img = np.zeros((h, w, 3))
    sky_t = np.clip((90.0 - lat) / (90.0 - spec.horizon_deg), 0.0, 1.0)
    sky = (1 - sky_t[..., None]) * np.array(pal["sky_top"]) + sky_t[..., None] * np.array(
        pal["sky_horizon"]
    )
    ground_t = np.clip((spec.horizon_deg - lat) / (spec.horizon_deg + 90.0), 0.0, 1.0)
    ground = np.array(pal["ground"]) * (1.0 - 0.5 * ground_t[..., None])
    above = lat >= spec.horizon_deg
    img[above] = sky[above]
    img[~above] = ground[~above]

    # one box per longitude slot keeps boxes disjoint for any count <= 6;
    # slots stay inside [-150, 150] so the wrap seam is always pure background
    n = spec.object_count
    slot = 300.0 / max(n, 1)
    for k in range(n):
        center_lon = -150.0 + (k + rng.uniform(0.35, 0.65)) * slot
        center_lat = rng.uniform(-32.0, 32.0)
        half_w = rng.uniform(8.0, min(14.0, slot / 2.0 - 4.0))
        half_h = rng.uniform(6.0, 12.0)
        color = pal["objects"][k % len(pal["objects"])]
        dlon = np.abs(wrap_lon(lon - center_lon))
        box = (dlon < half_w) & (np.abs(lat - center_lat) < half_h)
        img[box] = color

    img = np.clip(img, 0.0, 1.0)
    full = np.concatenate([img, np.ones((h, w, 1))], axis=2)
    return EquirectImage(Tensor(full)), spec.caption()


def object_pixel_mask(spec, w, h):
    """Pixels occupied by boxes (re-rendered minus the pure background)."""
    full, _ = synth_panorama(spec, w, h)
    bg_spec = SynthSceneSpec(spec.seed, spec.palette, spec.horizon_deg, 0)
    bg, _ = synth_panorama(bg_spec, w, h)
    return np.any(np.abs(full.rgb - bg.rgb) > 1e-9, axis=2)


def count_components_wrap(mask):
    """4-connected component count with horizontal wrap (BFS labeling)."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    count = 0
    for i in range(h):
        for j in range(w):
            if not mask[i, j] or seen[i, j]:
                continue
            count += 1
            stack = [(i, j)]
            seen[i, j] = True
            while stack:
                y, x = stack.pop()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, (x + dx) % w
                    if 0 <= ny < h and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
    return count
