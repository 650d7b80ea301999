"""8-bit PNG and binary PPM readers/writers.

Pixel values are float arrays in [0, 1] inside the package; quantization to
bytes happens only here. Masks travel as single-channel PNGs (0 or 255).
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .tensor import ContractError


def to_u8(arr):
    return np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)


def from_u8(arr):
    return arr.astype(np.float64) / 255.0


def write_png(path, arr):
    """Write [H, W, 3] floats (RGB) or [H, W] floats (grayscale)."""
    a = to_u8(arr)
    if a.ndim == 2:
        Image.fromarray(a, mode="L").save(path, format="PNG")
    elif a.ndim == 3 and a.shape[2] == 3:
        Image.fromarray(a, mode="RGB").save(path, format="PNG")
    else:
        raise ContractError(f"write_png wants [H,W] or [H,W,3], got {a.shape}")


def read_png(path):
    """Read a PNG as floats in [0, 1]: [H, W, 3] for color, [H, W] for L."""
    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16"):
            return from_u8(np.asarray(im.convert("L")))
        return from_u8(np.asarray(im.convert("RGB")))


def write_mask_png(path, mask):
    write_png(path, np.asarray(mask, dtype=np.float64))


def read_mask_png(path):
    return (read_png(path) >= 0.5).astype(np.float64)


def write_ppm(path, arr):
    """Binary P6 PPM, 8-bit RGB."""
    a = to_u8(arr)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ContractError(f"write_ppm wants [H,W,3], got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(a.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise ContractError("not a binary P6 PPM")
    # header: magic, width, height, maxval, single whitespace, then payload
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while blob[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1
    w, h, maxval = fields
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def read_image(path):
    """Dispatch on extension; returns floats in [0, 1]."""
    p = str(path)
    if p.lower().endswith(".ppm"):
        return read_ppm(p)
    return read_png(p)


def write_image(path, arr):
    p = str(path)
    if p.lower().endswith(".ppm"):
        write_ppm(p, arr)
    else:
        write_png(p, arr)
