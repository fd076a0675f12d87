"""JPEG-style degradation: the lossy half of the codec, minus entropy coding.

Pipeline per image: RGB -> full-range BT.601 YCbCr, optional 4:2:0 chroma
box-downsample, per-8x8-block level shift + orthonormal DCT, quantize with
IJG-scaled tables, dequantize, inverse DCT, nearest-neighbor chroma upsample,
YCbCr -> RGB, clamp. Entropy coding is lossless and therefore skipped; the
output pixels are exactly what a decoder would reconstruct.

Everything here is a pure function of its arguments, so degradation is
reproducible and safe to parallelize over images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# IJG Annex K base quantization tables (quality 50).
LUMA_BASE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

CHROMA_BASE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)

SUBSAMPLINGS = ("420", "444")


@dataclass(frozen=True)
class DegradeSpec:
    """Compression settings: integer quality 1..100 and chroma subsampling."""

    quality: int
    subsampling: str = "420"

    def __post_init__(self):
        q = self.quality
        if not isinstance(q, (int, np.integer)) or isinstance(q, bool):
            raise TypeError(f"quality must be an integer, got {type(q).__name__}")
        if not 1 <= q <= 100:
            raise ValueError(f"quality {q} outside [1, 100]")
        if self.subsampling not in SUBSAMPLINGS:
            raise ValueError(f"subsampling must be one of {SUBSAMPLINGS}, "
                             f"got {self.subsampling!r}")


@dataclass(frozen=True)
class QuantTable:
    luma: np.ndarray    # 8x8 int64 in [1, 255]
    chroma: np.ndarray  # 8x8 int64 in [1, 255]


def build_quant_table(quality) -> QuantTable:
    """IJG scaling of the Annex K base tables.

    s = 5000/q below quality 50, else 200 - 2q; each entry maps to
    floor((entry*s + 50) / 100) clamped to [1, 255].
    """
    DegradeSpec(quality)  # range/type validation
    q = int(quality)
    s = 5000 // q if q < 50 else 200 - 2 * q

    def scale(base):
        return np.clip((base * s + 50) // 100, 1, 255)

    return QuantTable(luma=scale(LUMA_BASE), chroma=scale(CHROMA_BASE))


# orthonormal 8-point DCT-II matrix: row 0 is 1/sqrt(8), row k>0 is
# 0.5*cos((2n+1) k pi / 16)
def _dct_matrix():
    n = np.arange(8)
    k = n.reshape(8, 1)
    m = 0.5 * np.cos((2 * n + 1) * k * np.pi / 16.0)
    m[0, :] = 1.0 / np.sqrt(8.0)
    return m


DCT_MAT = _dct_matrix()


def dct8(block):
    """Orthonormal 2-D DCT-II of one 8x8 float block."""
    b = np.asarray(block, dtype=np.float64)
    if b.shape != (8, 8):
        raise ValueError(f"dct8 expects an 8x8 block, got {b.shape}")
    return DCT_MAT @ b @ DCT_MAT.T


def idct8(coeffs):
    """Inverse (DCT-III) of :func:`dct8`."""
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != (8, 8):
        raise ValueError(f"idct8 expects an 8x8 block, got {c.shape}")
    return DCT_MAT.T @ c @ DCT_MAT


# full-range BT.601 (JFIF) color transform
_YCC_FWD = np.array([
    [0.299, 0.587, 0.114],
    [-0.299 / 1.772, -0.587 / 1.772, 0.886 / 1.772],
    [0.701 / 1.402, -0.587 / 1.402, -0.114 / 1.402],
])
_YCC_INV = np.linalg.inv(_YCC_FWD)


def rgb_to_ycbcr(rgb):
    """[H,W,3] float RGB (0..255) -> float YCbCr; chroma centered at 128."""
    out = np.asarray(rgb, dtype=np.float64) @ _YCC_FWD.T
    out[..., 1] += 128.0
    out[..., 2] += 128.0
    return out


def ycbcr_to_rgb(ycc):
    shifted = np.asarray(ycc, dtype=np.float64).copy()
    shifted[..., 1] -= 128.0
    shifted[..., 2] -= 128.0
    return shifted @ _YCC_INV.T


def _pad_to_multiple(plane, m):
    h, w = plane.shape
    ph = (-h) % m
    pw = (-w) % m
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane


def _code_plane(plane, table):
    """Blockwise DCT -> quantize -> dequantize -> IDCT; plane dims % 8 == 0."""
    h, w = plane.shape
    blocks = plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3) - 128.0
    coeffs = DCT_MAT @ blocks @ DCT_MAT.T
    coeffs = np.round(coeffs / table) * table
    rec = DCT_MAT.T @ coeffs @ DCT_MAT + 128.0
    return rec.transpose(0, 2, 1, 3).reshape(h, w)


def jpeg_degrade(img, spec: DegradeSpec):
    """Degrade an [H,W,3] uint8 RGB image; output has identical shape/dtype."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected [H,W,3] RGB image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 samples, got {arr.dtype}")
    h, w = arr.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("degenerate image dimensions")

    tables = build_quant_table(spec.quality)
    ycc = rgb_to_ycbcr(arr.astype(np.float64))

    grid = 16 if spec.subsampling == "420" else 8
    y = _pad_to_multiple(ycc[..., 0], grid)
    cb = _pad_to_multiple(ycc[..., 1], grid)
    cr = _pad_to_multiple(ycc[..., 2], grid)

    if spec.subsampling == "420":
        # 2x2 box average down, nearest-neighbor duplication back up
        def down(p):
            return p.reshape(p.shape[0] // 2, 2, p.shape[1] // 2, 2).mean(axis=(1, 3))

        def up(p):
            return p.repeat(2, axis=0).repeat(2, axis=1)

        cb = up(_code_plane(down(cb), tables.chroma))
        cr = up(_code_plane(down(cr), tables.chroma))
    else:
        cb = _code_plane(cb, tables.chroma)
        cr = _code_plane(cr, tables.chroma)
    y = _code_plane(y, tables.luma)

    rec = ycbcr_to_rgb(np.stack([y[:h, :w], cb[:h, :w], cr[:h, :w]], axis=-1))
    return np.clip(np.round(rec), 0, 255).astype(np.uint8)
