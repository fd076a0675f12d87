"""RGB image quality metrics: PSNR, SSIM, and PSNR-B.

All three take uint8 [H,W,3] RGB arrays and are pure functions. PSNR pools
squared error over every sample. SSIM uses the classic 11x11 Gaussian window
(sigma 1.5, K1=0.01, K2=0.03, L=255), evaluated on fully-covered window
positions per channel and averaged across channels. PSNR-B folds a blocking
effect factor (mean squared luminance jump across 8-aligned block boundaries
in the test image, in excess of the non-boundary jump) into the MSE, pooling
boundary statistics across the three channels, so psnrb <= psnr always holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
BLOCK = 8


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    psnrb: float


def _check_pair(ref, test):
    r = np.asarray(ref)
    t = np.asarray(test)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: ref {r.shape} vs test {t.shape}")
    if r.ndim != 3 or r.shape[2] != 3:
        raise ValueError(f"expected [H,W,3] images, got {r.shape}")
    if r.dtype != np.uint8 or t.dtype != np.uint8:
        raise ValueError(f"expected uint8 samples, got {r.dtype}/{t.dtype}")
    return r.astype(np.float64), t.astype(np.float64)


def mse(ref, test):
    r, t = _check_pair(ref, test)
    d = r - t
    return float((d * d).mean())


def psnr(ref, test):
    """10*log10(255^2 / MSE) over all RGB samples; inf for identical images."""
    m = mse(ref, test)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / m)


def _gaussian_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


_SSIM_K = _gaussian_kernel()


def _window_mean(plane):
    # separable Gaussian, then crop to fully-covered (valid) positions
    half = SSIM_WINDOW // 2
    out = correlate1d(plane, _SSIM_K, axis=0, mode="constant")
    out = correlate1d(out, _SSIM_K, axis=1, mode="constant")
    return out[half:plane.shape[0] - half, half:plane.shape[1] - half]


def _ssim_channel(x, y):
    c1 = (K1 * PEAK) ** 2
    c2 = (K2 * PEAK) ** 2
    mx = _window_mean(x)
    my = _window_mean(y)
    vx = _window_mean(x * x) - mx * mx
    vy = _window_mean(y * y) - my * my
    cxy = _window_mean(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float((num / den).mean())


def ssim(ref, test):
    """Mean local SSIM over valid 11x11 windows, averaged across channels."""
    r, t = _check_pair(ref, test)
    h, w = r.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([_ssim_channel(r[..., c], t[..., c]) for c in range(3)]))


def _bef(test):
    """Blocking effect factor of the degraded image, pooled over channels.

    Squared sample-to-sample jumps are split into those straddling an
    8-aligned block edge and the rest; when the boundary mean exceeds the
    non-boundary mean the (weighted) excess is returned, else 0.
    """
    h, w = test.shape[:2]
    sb = snb = 0.0   # sums of squared jumps, boundary / non-boundary
    nb = nnb = 0     # counts
    for c in range(3):
        plane = test[..., c]
        dh = np.diff(plane, axis=1)  # dh[:, k] spans columns (k, k+1)
        dv = np.diff(plane, axis=0)
        bh = np.zeros(dh.shape[1], dtype=bool)
        bh[BLOCK - 1::BLOCK] = True
        bv = np.zeros(dv.shape[0], dtype=bool)
        bv[BLOCK - 1::BLOCK] = True
        sb += (dh[:, bh] ** 2).sum() + (dv[bv, :] ** 2).sum()
        snb += (dh[:, ~bh] ** 2).sum() + (dv[~bv, :] ** 2).sum()
        nb += dh[:, bh].size + dv[bv, :].size
        nnb += dh[:, ~bh].size + dv[~bv, :].size
    if nb == 0 or nnb == 0:
        return 0.0
    db = sb / nb
    dnb = snb / nnb
    if db <= dnb:
        return 0.0
    eta = math.log2(BLOCK) / math.log2(min(h, w))
    return eta * (db - dnb)


def psnrb(ref, test):
    """10*log10(255^2 / (MSE + BEF)); BEF depends on the test image only."""
    r, t = _check_pair(ref, test)
    h, w = r.shape[:2]
    if min(h, w) < BLOCK + 1:
        raise ValueError(f"image {h}x{w} too small for 8-block boundary statistics")
    d = r - t
    total = float((d * d).mean()) + _bef(t)
    if total == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / total)


def evaluate_pair(ref, test) -> MetricReport:
    return MetricReport(psnr=psnr(ref, test), ssim=ssim(ref, test),
                        psnrb=psnrb(ref, test))
