"""Low-level float image operations used by detection, synthesis and preprocessing.

Coordinates follow pixel-index convention: pixel ``(i, j)`` sits at ``x=j, y=i``.
A resample with scale ``s`` maps source point ``x`` to ``(x - x0) * s``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, sigma_x: float | None = None) -> np.ndarray:
    """Separable Gaussian blur over the two spatial axes, reflected borders."""
    out = np.asarray(img, dtype=np.float64)
    sy, sx = sigma, sigma if sigma_x is None else sigma_x
    if sy > 0:
        out = ndimage.correlate1d(out, gaussian_kernel(sy), axis=0, mode="reflect")
    if sx > 0:
        out = ndimage.correlate1d(out, gaussian_kernel(sx), axis=1, mode="reflect")
    return out


def _linear_taps(coords: np.ndarray, n: int):
    c = np.clip(coords, 0.0, n - 1)
    lo = np.floor(c).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, c - lo


def resample(img: np.ndarray, x0: float, y0: float, sx: float, sy: float,
             out_w: int, out_h: int, antialias: bool = True) -> np.ndarray:
    """Bilinear resample: ``out[i, j] = img(y0 + i / sy, x0 + j / sx)``.

    Out-of-range samples clamp to the nearest edge pixel. When shrinking, the
    source is low-passed first so detail finer than the output grid does not alias.
    """
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]
    ys = y0 + np.arange(out_h, dtype=np.float64) / sy
    xs = x0 + np.arange(out_w, dtype=np.float64) / sx
    if antialias and (sx < 1 or sy < 1):
        sig_y = max(0.0, (1.0 / sy - 1.0) / 2.0)
        sig_x = max(0.0, (1.0 / sx - 1.0) / 2.0)
        pad_y = math.ceil(3 * sig_y) + 2
        pad_x = math.ceil(3 * sig_x) + 2
        r0 = max(0, int(math.floor(ys.min())) - pad_y)
        r1 = min(h, int(math.ceil(ys.max())) + pad_y + 1)
        c0 = max(0, int(math.floor(xs.min())) - pad_x)
        c1 = min(w, int(math.ceil(xs.max())) + pad_x + 1)
        if r1 > r0 and c1 > c0:
            src = gaussian_blur(src[r0:r1, c0:c1], sig_y, sig_x)
            ys = ys - r0
            xs = xs - c0
            h, w = src.shape[:2]
        else:
            # window lies entirely outside the image, edge clamp only
            pass
    ylo, yhi, fy = _linear_taps(ys, h)
    xlo, xhi, fx = _linear_taps(xs, w)
    extra = (1,) * (src.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    rows = src[ylo] * (1 - fy) + src[yhi] * fy
    fx = fx.reshape((1, -1) + extra)
    return rows[:, xlo] * (1 - fx) + rows[:, xhi] * fx


def rescale(img: np.ndarray, factor: float) -> np.ndarray:
    """Whole-image resize by ``factor`` (output size rounded down, at least 1)."""
    h, w = img.shape[:2]
    out_h = max(1, int(math.floor(h * factor)))
    out_w = max(1, int(math.floor(w * factor)))
    return resample(img, 0.0, 0.0, factor, factor, out_w, out_h)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
