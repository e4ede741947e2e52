"""Low-level image math on CHW float arrays in [0, 1].

Every resample in the package goes through ``bilinear_resize`` so there is a
single documented convention: bilinear with half-pixel centers, edge clamp.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a [C, H, W] array with half-pixel-center bilinear sampling.

    Returns the input unchanged (same object) when the size already matches,
    which makes the no-resize case exactly lossless.
    """
    if img.ndim != 3:
        raise DimensionError(f"bilinear_resize expects CHW, got shape {img.shape}")
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img

    # source coordinate of each output center, clamped to the valid range
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)

    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)
    wx = (xs - x0).astype(img.dtype)

    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma replicated over the three channels."""
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.stack([luma, luma, luma])


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return clamp01(img * factor)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).mean()
    return clamp01((img - mean) * factor + mean)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    gray = to_grayscale(img)
    return clamp01(gray + (img - gray) * factor)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    dz = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / dz
    gc = (maxc - g) / dz
    bc = (maxc - b) / dz
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6

    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(img.dtype)


def adjust_hue(img: np.ndarray, delta: float) -> np.ndarray:
    """Rotate hue by ``delta`` (fraction of the full circle, in [-0.5, 0.5])."""
    if delta == 0.0:
        return img
    hsv = rgb_to_hsv(img)
    hsv[0] = (hsv[0] + delta) % 1.0
    return clamp01(hsv_to_rgb(hsv))


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian with reflect padding; radius 2*sigma rounded up."""
    radius = max(1, int(math.ceil(2.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel = (kernel / kernel.sum()).astype(img.dtype)

    pad = np.pad(img, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    rows = np.zeros_like(img)
    for k, kv in enumerate(kernel):
        rows += kv * pad[:, k : k + img.shape[1], :]
    pad = np.pad(rows, ((0, 0), (0, 0), (radius, radius)), mode="reflect")
    out = np.zeros_like(img)
    for k, kv in enumerate(kernel):
        out += kv * pad[:, :, k : k + img.shape[2]]
    return clamp01(out)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert every pixel at or above the threshold."""
    return np.where(img >= threshold, 1.0 - img, img).astype(img.dtype)
