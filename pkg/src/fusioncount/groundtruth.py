"""Ground-truth pipeline: point annotations to density maps and masks.

Each annotated head becomes a truncated Gaussian renormalized to unit
in-image mass, so the map total always equals the head count, including
heads at image borders.  Supervision targets at coarser grids come from
sum pooling, which preserves that total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SIGMA = 4.0
DEFAULT_SEG_TAU = 1e-3

MAX_SIDE = 1024
SIDE_MULTIPLE = 16


@dataclass
class PointAnnotation:
    """Sub-pixel head coordinates for one image.

    ``points`` is an (n, 2) float array of (x, y) pixel positions;
    every point must lie inside ``image_size`` = (H, W).
    """

    points: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        h, w = self.image_size
        if pts.size:
            x, y = pts[:, 0], pts[:, 1]
            bad = (x < 0) | (x >= w) | (y < 0) | (y >= h)
            if bad.any():
                i = int(np.argmax(bad))
                raise ValueError(
                    f"point {pts[i].tolist()} outside image of size {h}x{w}"
                )
        self.points = pts

    @property
    def count(self):
        return self.points.shape[0]


@dataclass
class DensityMap:
    """Non-negative map whose sum is the person count at its resolution."""

    values: np.ndarray
    resolution_divisor: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"density map must be 2-d, got shape {self.values.shape}")

    def total(self):
        return float(np.sum(self.values, dtype=np.float64))


@dataclass
class AugmentSpec:
    crop: int = 224
    hflip_prob: float = 0.5
    brightness_range: tuple[float, float] = (0.9, 1.1)
    saturation_range: tuple[float, float] = (0.9, 1.1)


def resize_dims(h, w):
    """Snap (h, w) to the training grid: multiples of 16, longest side <= 1024.

    The longest side is scaled down to fit 1024 if needed, then both dims
    are floored to the nearest multiple of 16 (never below 16).  Already
    conforming inputs come back unchanged, which also makes the rule
    idempotent.
    """
    if h < SIDE_MULTIPLE or w < SIDE_MULTIPLE:
        raise ValueError(f"dims must be >= {SIDE_MULTIPLE}, got {h}x{w}")
    scale = min(1.0, MAX_SIDE / max(h, w))
    h2 = max(SIDE_MULTIPLE, (int(h * scale) // SIDE_MULTIPLE) * SIDE_MULTIPLE)
    w2 = max(SIDE_MULTIPLE, (int(w * scale) // SIDE_MULTIPLE) * SIDE_MULTIPLE)
    return h2, w2


def generate_density_map(ann: PointAnnotation, sigma: float = DEFAULT_SIGMA) -> DensityMap:
    """Render point annotations as a sum of unit-mass Gaussian kernels.

    Each head contributes a Gaussian truncated at radius ceil(4*sigma)
    and renormalized over its in-image support, so the per-head mass is
    exactly one even at corners.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = ann.image_size
    acc = np.zeros((h, w), dtype=np.float64)
    r = int(math.ceil(4.0 * sigma))
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for x, y in ann.points:
        cx, cy = int(math.floor(x)), int(math.floor(y))
        i0, i1 = max(cy - r, 0), min(cy + r + 1, h)
        j0, j1 = max(cx - r, 0), min(cx + r + 1, w)
        ii = np.arange(i0, i1, dtype=np.float64)
        jj = np.arange(j0, j1, dtype=np.float64)
        kernel = np.exp(-((ii[:, None] - y) ** 2 + (jj[None, :] - x) ** 2) * inv2s2)
        acc[i0:i1, j0:j1] += kernel / kernel.sum()
    return DensityMap(acc.astype(np.float32), resolution_divisor=1)


def downsample_sum(dmap: DensityMap, factor: int) -> DensityMap:
    """Sum-pool a density map by an integer factor, preserving the total."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return DensityMap(dmap.values.copy(), dmap.resolution_divisor)
    h, w = dmap.values.shape
    if h % factor or w % factor:
        raise ValueError(f"dims {h}x{w} not divisible by factor {factor}")
    pooled = (
        dmap.values.astype(np.float64)
        .reshape(h // factor, factor, w // factor, factor)
        .sum(axis=(1, 3))
    )
    return DensityMap(pooled.astype(np.float32), dmap.resolution_divisor * factor)


def make_seg_mask(density: DensityMap, tau: float = DEFAULT_SEG_TAU) -> np.ndarray:
    """Binary crowd mask: 1 where density exceeds tau, else 0."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    return (density.values > tau).astype(np.float32)


def augment(image, density: DensityMap, mask=None, spec: AugmentSpec | None = None,
            rng_seed=0):
    """Random crop + horizontal flip + color jitter for one training sample.

    The crop window and flip decision are shared by the image, the
    density map and the mask (all at the same resolution); brightness
    and saturation jitter touch the image only.  Deterministic for a
    fixed ``rng_seed``.  Returns (image, DensityMap, mask).
    """
    spec = spec or AugmentSpec()
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if density.values.shape != (h, w):
        raise ValueError(
            f"density shape {density.values.shape} != image shape {(h, w)}"
        )
    c = spec.crop
    if h < c or w < c:
        raise ValueError(f"image {h}x{w} smaller than crop {c}")

    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, h - c + 1))
    left = int(rng.integers(0, w - c + 1))
    flip = bool(rng.random() < spec.hflip_prob)
    b_factor = float(rng.uniform(*spec.brightness_range))
    s_factor = float(rng.uniform(*spec.saturation_range))

    img = img[top:top + c, left:left + c].copy()
    den = density.values[top:top + c, left:left + c].copy()
    msk = None if mask is None else np.asarray(mask)[top:top + c, left:left + c].copy()
    if flip:
        img = img[:, ::-1].copy()
        den = den[:, ::-1].copy()
        if msk is not None:
            msk = msk[:, ::-1].copy()

    img = img * b_factor
    if img.shape[2] == 3 and s_factor != 1.0:
        gray = img.mean(axis=2, keepdims=True)
        img = gray + s_factor * (img - gray)
    img = np.clip(img, 0.0, 1.0)

    return img, DensityMap(den, density.resolution_divisor), msk
