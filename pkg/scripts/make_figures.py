#!/usr/bin/env python3
"""Render a contact sheet of synthetic scenes plus their cubemaps, handy for
eyeballing the corpus before a training run.

    python scripts/make_figures.py --out figures/
"""

import argparse
import os
import sys

import numpy as np

from panomamba import images, pano
from panomamba.synth import random_scene_spec, synth_panorama


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="figures")
    ap.add_argument("--count", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--width", type=int, default=256)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        spec = random_scene_spec(i, base_seed=args.seed)
        img, cap = synth_panorama(spec, args.width, args.width // 2)
        images.write_png(os.path.join(args.out, f"scene_{i:02d}.png"), img.rgb)
        cube = pano.equirect_to_cubemap(img, args.width // 4)
        strip = np.concatenate([cube.face(f)[:, :, :3] for f in pano.FACE_ORDER], axis=1)
        images.write_png(os.path.join(args.out, f"scene_{i:02d}_cube.png"), strip)
        print(f"scene_{i:02d}: {cap}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
