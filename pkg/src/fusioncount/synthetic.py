"""Synthetic crowd scenes: bright head-like blobs on a textured background.

Stands in for real crowd photos so the full pipeline can be exercised
and benchmarked on a desk in seconds.  Everything is deterministic per
seed, which the dataset tooling and tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .groundtruth import PointAnnotation


@dataclass
class SceneSpec:
    size: tuple[int, int] = (64, 64)
    count_range: tuple[int, int] = (3, 12)
    head_radius_range: tuple[float, float] = (1.5, 3.5)
    bg_texture: float = 0.25  # background contrast amplitude in [0, 1]


def _background(rng, h, w, amplitude):
    # low-frequency texture: coarse noise, bilinearly stretched to full size
    gh, gw = max(h // 8, 2), max(w // 8, 2)
    coarse = rng.random((gh, gw))
    yi = np.linspace(0, gh - 1, h)
    xi = np.linspace(0, gw - 1, w)
    y0 = np.floor(yi).astype(int)
    x0 = np.floor(xi).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]
    field = (
        coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + coarse[np.ix_(y1, x0)] * fy * (1 - fx)
        + coarse[np.ix_(y0, x1)] * (1 - fy) * fx
        + coarse[np.ix_(y1, x1)] * fy * fx
    )
    return 0.1 + amplitude * field


def synth_scene(spec: SceneSpec | None = None, rng_seed=0):
    """Render one scene; returns (float32 HxWx3 image in [0,1], PointAnnotation)."""
    spec = spec or SceneSpec()
    lo, hi = spec.count_range
    if lo > hi or lo < 0:
        raise ValueError(f"bad count_range {spec.count_range}")
    h, w = spec.size
    rng = np.random.default_rng(rng_seed)

    img = np.empty((h, w, 3), dtype=np.float64)
    base = _background(rng, h, w, spec.bg_texture)
    for ch in range(3):
        img[:, :, ch] = base * rng.uniform(0.85, 1.15)

    count = int(rng.integers(lo, hi + 1))
    points = np.empty((count, 0)) if count == 0 else None
    xs = rng.uniform(1.0, w - 1.0, size=count)
    ys = rng.uniform(1.0, h - 1.0, size=count)
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    for x, y in zip(xs, ys):
        radius = rng.uniform(*spec.head_radius_range)
        peak = rng.uniform(0.55, 0.95)
        tint = rng.uniform(0.85, 1.0, size=3)
        blob = peak * np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2.0 * (radius / 2.0) ** 2))
        for ch in range(3):
            img[:, :, ch] += blob * tint[ch]

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    points = np.stack([xs, ys], axis=1) if count else np.empty((0, 2))
    return img, PointAnnotation(points, (h, w))
