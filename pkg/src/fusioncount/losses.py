"""Training objectives: density regression, masked binarization BCE, and
their weighted total.

The BCE here is the conventional negated form (so it is non-negative and
minimized by gradient descent); its gradient with respect to the map
difference t = prob - bias is k*(m - y)/N for m = sigmoid(k*t).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .model import soft_binarize

PROB_EPS = 1e-7  # keeps log finite once the steep sigmoid saturates


@dataclass
class LossWeights:
    alpha_loss: float = 1.0
    lambda_seg: float = 0.005
    denom: float = 4.0

    def __post_init__(self):
        if self.alpha_loss <= 0 or self.lambda_seg < 0 or self.denom <= 0:
            raise ValueError(f"bad loss weights: {self}")


def mse_loss(pred, gt):
    """Mean over all elements of the squared difference."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mse_loss: shapes differ: {pred.shape} vs {gt.shape}")
    diff = ad.sub(pred, gt)
    return ad.mean_all(ad.mul(diff, diff))


def intermediate_loss(intermediates, gt_density_8):
    """Sum of per-block density MSEs against the stride-8 ground truth."""
    if not intermediates:
        warnings.warn("no intermediate maps supplied; supervision disabled")
        return Tensor(np.float32(0.0))
    total = mse_loss(intermediates[0], gt_density_8)
    for inter in intermediates[1:]:
        total = ad.add(total, mse_loss(inter, gt_density_8))
    return total


def bce_seg_loss(prob, bias, mask, k):
    """Per-pixel binary cross-entropy through the steep binarization.

    ``mask`` is the binary ground truth; predictions are clamped to
    [1e-7, 1-1e-7] before the logs.
    """
    prob, bias = as_tensor(prob), as_tensor(bias)
    y = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if prob.shape != bias.shape or y.shape != prob.shape:
        raise ValueError(
            f"bce_seg_loss: shapes differ: {prob.shape}, {bias.shape}, {y.shape}"
        )
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce_seg_loss: mask must be binary")
    y = y.astype(prob.dtype)
    m = ad.clip(soft_binarize(prob, bias, k), PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.mul(ad.log(m), Tensor(y, dtype=prob.dtype))
    neg = ad.mul(ad.log(ad.sub(1.0, m)), Tensor(1.0 - y, dtype=prob.dtype))
    return ad.mul(ad.mean_all(ad.add(pos, neg)), -1.0)


def total_loss(l_inter, l_count, l_seg, weights: LossWeights | None = None):
    """Weighted sum: (alpha/denom)*(intermediate + counting) + lambda*seg."""
    w = weights or LossWeights()
    for name, val in (("l_inter", l_inter), ("l_count", l_count), ("l_seg", l_seg)):
        data = val.data if isinstance(val, Tensor) else val
        if not np.all(np.isfinite(data)):
            raise ValueError(f"total_loss: non-finite {name}")
    combined = ad.mul(ad.add(as_tensor(l_inter), as_tensor(l_count)),
                      w.alpha_loss / w.denom)
    return ad.add(combined, ad.mul(as_tensor(l_seg), w.lambda_seg))
