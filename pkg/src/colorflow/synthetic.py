"""Procedural test images with continuous color distributions.

Deterministic flows cannot spread a point mass, so corpora used to train
flows need palettes with real volume: smooth spatial fields blend a few
anchor colors and per-pixel noise adds thickness.
"""

from __future__ import annotations

import colorsys

import numpy as np

from .imagecore import RgbImage


def _quantize(data: np.ndarray) -> np.ndarray:
    return (np.rint(np.clip(data, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def smooth_field(rng: np.random.Generator, height: int, width: int, waves: int = 4) -> np.ndarray:
    """Sum of random plane waves, rescaled to [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / max(height - 1, 1)
    xx = xx / max(width - 1, 1)
    f = np.zeros((height, width))
    for _ in range(waves):
        kx, ky = rng.uniform(-3.0, 3.0, 2) * np.pi
        f += rng.uniform(0.5, 1.0) * np.sin(kx * xx + ky * yy + rng.uniform(0, 2 * np.pi))
    f -= f.min()
    return f / max(f.max(), 1e-12)


def palette_image(
    rng: np.random.Generator,
    height: int = 64,
    width: int = 64,
    noise: float | None = None,
    anchors: np.ndarray | None = None,
) -> RgbImage:
    """Three anchor colors blended by two smooth fields, plus Gaussian noise."""
    if anchors is None:
        anchors = rng.uniform(0.05, 0.95, size=(3, 3))
    if noise is None:
        noise = rng.uniform(0.03, 0.08)
    f = smooth_field(rng, height, width)[..., None]
    g = smooth_field(rng, height, width)[..., None]
    c0, c1, c2 = anchors
    data = c0 + f * (c1 - c0) + g * (1 - f) * (c2 - c0)
    data = data + rng.normal(0.0, noise, size=data.shape)
    return RgbImage(_quantize(data))


def hue_palette_image(rng: np.random.Generator, hue: float, height: int = 64, width: int = 64) -> RgbImage:
    """Image dominated by one hue: random saturation/value fields around it."""
    s = 0.45 + 0.5 * smooth_field(rng, height, width)
    v = 0.35 + 0.6 * smooth_field(rng, height, width)
    h = (hue + rng.normal(0.0, 0.02, size=(height, width))) % 1.0
    rgb = np.array(
        [colorsys.hsv_to_rgb(a, b, c) for a, b, c in zip(h.ravel(), s.ravel(), v.ravel())]
    ).reshape(height, width, 3)
    rgb += rng.normal(0.0, 0.02, size=rgb.shape)
    return RgbImage(_quantize(rgb))


def gaussian_image(
    rng: np.random.Generator, mean, cov, height: int = 64, width: int = 64, smooth: bool = True
) -> RgbImage:
    """Pixels drawn from N(mean, cov), optionally ordered along a smooth field."""
    n = height * width
    pts = rng.multivariate_normal(np.asarray(mean, float), np.asarray(cov, float), size=n)
    if smooth:
        # arrange by luma along a smooth field so the image has spatial structure
        field = smooth_field(rng, height, width).ravel()
        order_field = np.argsort(field, kind="stable")
        order_pts = np.argsort(pts @ np.array([0.2126, 0.7152, 0.0722]), kind="stable")
        arranged = np.empty_like(pts)
        arranged[order_field] = pts[order_pts]
        pts = arranged
    return RgbImage(_quantize(pts.reshape(height, width, 3)))


def gray_ramp(height: int = 32, width: int = 64, lo: float = 0.0, hi: float = 1.0) -> RgbImage:
    """Horizontal gray ramp with every value on the cube diagonal."""
    ramp = np.linspace(lo, hi, width)
    data = np.repeat(np.repeat(ramp[None, :, None], height, axis=0), 3, axis=2)
    return RgbImage(_quantize(data))


def uniform_image(color, height: int = 8, width: int = 8) -> RgbImage:
    return RgbImage(np.broadcast_to(np.asarray(color, np.float32), (height, width, 3)).copy())


def corpus(seed: int, count: int, height: int = 64, width: int = 64) -> list[RgbImage]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        img = palette_image(rng, height, width)
        out.append(RgbImage(img.data, source_id=f"img{i:04d}"))
    return out
