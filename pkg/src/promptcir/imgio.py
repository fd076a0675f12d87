"""Image file I/O and array<->tensor conversion helpers.

PNG goes through Pillow; binary PPM (P6, maxval 255) is read and written
directly since the format is trivial and useful in minimal environments.
Arrays are uint8 [H,W,3] RGB everywhere; the model side works on float32
[B,3,H,W] in [0,1].
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

SUPPORTED = (".png", ".ppm", ".bmp", ".jpg", ".jpeg")


def read_image(path):
    """Load an image file as uint8 [H,W,3] RGB."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, img):
    """Write uint8 [H,W,3] RGB to PNG/PPM/BMP chosen by extension."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected uint8 [H,W,3], got {arr.dtype} {arr.shape}")
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        _write_ppm(path, arr)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def _read_ppm(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    pos, fields = 2, []
    while len(fields) < 3:
        m = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\d+)").match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    if data.size != h * w * 3:
        raise ValueError(f"{path}: pixel payload truncated")
    return data.reshape(h, w, 3).copy()


def _write_ppm(path, arr):
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def to_model_input(img):
    """uint8 [H,W,3] -> float32 [1,3,H,W] scaled to [0,1]."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected uint8 [H,W,3], got {arr.dtype} {arr.shape}")
    chw = arr.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    return np.ascontiguousarray(chw[None])


def from_model_output(x):
    """float [1,3,H,W] or [3,H,W] in [0,1] -> uint8 [H,W,3] (round, clamp)."""
    arr = np.asarray(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"expected batch of 1, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got {arr.shape}")
    hw3 = np.clip(np.round(arr.astype(np.float64) * 255.0), 0, 255)
    return hw3.transpose(1, 2, 0).astype(np.uint8)
