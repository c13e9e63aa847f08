"""Whole-model gradient verification against the finite-difference oracle.

Finite differences cannot cross a kink (relu corner, probability clamp,
exponent clamp) without corrupting the comparison, so the fixture scans
seeds and keeps the first whose forward pass stays clear of every kink
by a wide margin relative to the step size.  The check itself is the
plain oracle from :mod:`fusioncount.autodiff`; nothing is masked.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, trace_kinks
from .groundtruth import DensityMap, downsample_sum, make_seg_mask
from .losses import LossWeights, bce_seg_loss, intermediate_loss, mse_loss, total_loss
from .model import ModelConfig, init_params, model_forward, tiny_config, trainable

EPS_DEFAULT = 1e-5

# margins a finite-difference step of EPS_DEFAULT cannot bridge
# (relu/sigmoid margins are absolute; the clip margin is relative)
_MARGINS = {"relu": 1e-4, "clip": 5e-2, "sigmoid_clamp": 5e-2}


def _loss_fixture(cfg: ModelConfig, seed, size=32):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    image = rng.random((1, 3, size, size), dtype=np.float32)
    gt_full = DensityMap(
        (rng.random((size, size)) * 0.05).astype(np.float32)
    )
    gt4 = downsample_sum(gt_full, 4)
    gt8 = downsample_sum(gt_full, 8)
    mask = make_seg_mask(gt4, 1e-3)
    return params, image, gt4, gt8, mask


def build_check(cfg: ModelConfig, seed, size=32):
    """Return (fn, inputs) for grad_check over image plus all parameters."""
    params, image, gt4, gt8, mask = _loss_fixture(cfg, seed, size)
    names = [n for n, _ in trainable(params)]
    inputs = [Tensor(image, requires_grad=True)] + [params[n] for n in names]
    weights = LossWeights()

    gt4_by_dtype = {
        dt: Tensor(gt4.values[None, None].astype(dt)) for dt in (np.float32, np.float64)
    }
    gt8_by_dtype = {
        dt: Tensor(gt8.values[None, None].astype(dt)) for dt in (np.float32, np.float64)
    }
    mask4 = mask[None, None]

    def fn(img, *tensors):
        local = dict(params)
        for name, t in zip(names, tensors):
            local[name] = t
        out = model_forward(img, local, cfg)
        dt = img.dtype.type
        l_i = intermediate_loss(out.intermediates, gt8_by_dtype[dt])
        l_c = mse_loss(out.density, gt4_by_dtype[dt])
        l_s = bce_seg_loss(out.seg_prob, out.seg_bias, mask4, cfg.sdb_k)
        return total_loss(l_i, l_c, l_s, weights)

    return fn, inputs


def _min_margins(fn, inputs):
    with trace_kinks() as kinks:
        fn(*inputs)
    worst = {}
    for kind, margin in kinks:
        worst[kind] = min(worst.get(kind, np.inf), margin)
    return worst


def find_clean_seed(cfg: ModelConfig, size=32, max_tries=200):
    """First seed whose forward pass keeps every kink at a safe distance."""
    best_seed, best_score = 0, -np.inf
    for seed in range(max_tries):
        fn, inputs = build_check(cfg, seed, size)
        worst = _min_margins(fn, inputs)
        ratios = [worst.get(k, np.inf) / m for k, m in _MARGINS.items()]
        score = min(ratios)
        if score >= 1.0:
            return seed
        if score > best_score:
            best_seed, best_score = seed, score
    return best_seed


def check_model_gradients(cfg: ModelConfig | None = None, eps=EPS_DEFAULT,
                          size=32, seed=None):
    """Max relative gradient error of the full loss w.r.t. image and params."""
    cfg = cfg or tiny_config()
    if seed is None:
        seed = find_clean_seed(cfg, size)
    fn, inputs = build_check(cfg, seed, size)
    return grad_check(fn, inputs, eps=eps)
