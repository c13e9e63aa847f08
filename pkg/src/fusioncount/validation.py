"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np


def check_image(image):
    """Coerce to float32 HxWx3 in [0, 1]; accepts grayscale and uint8."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected HxW or HxWx3 image, got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
        if arr.max() > 1.0 + 1e-6 or arr.min() < -1e-6:
            raise ValueError("float images must lie in [0, 1]")
    return arr


def check_points(points, image_shape):
    """Coerce to an (n, 2) float64 array of in-bounds (x, y) positions."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.empty((0, 2))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) point array, got shape {pts.shape}")
    h, w = image_shape[:2]
    if ((pts[:, 0] < 0) | (pts[:, 0] >= w) | (pts[:, 1] < 0) | (pts[:, 1] >= h)).any():
        raise ValueError(f"points must lie inside the {h}x{w} image")
    return pts


def check_image_list(X):
    if not hasattr(X, "__len__") or len(X) == 0:
        raise ValueError("need a non-empty sequence of images")
    return [check_image(img) for img in X]
