"""Evaluation measures: counting error and density-map quality.

Counting MAE is the mean absolute count error; counting MSE is the
root-mean-square count error (so MSE >= MAE always).  Map quality uses
PSNR and mean windowed SSIM after both maps are scaled by 1/max(gt),
making the scores invariant to a common rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    mae: float
    mse: float
    psnr: float
    ssim: float

    def as_dict(self):
        return {"mae": self.mae, "mse": self.mse, "psnr": self.psnr, "ssim": self.ssim}


def predicted_count(values):
    """Count read off a density map: its float64 sum."""
    return float(np.sum(np.asarray(values), dtype=np.float64))


def evaluate_counts(preds, gts):
    """(MAE, root-mean-square error) between predicted and true counts.

    ``preds`` may be density maps (summed to counts) or plain numbers.
    """
    if len(preds) != len(gts) or not preds:
        raise ValueError(f"need equal non-empty lists, got {len(preds)} vs {len(gts)}")
    counts = np.array(
        [p if np.isscalar(p) else predicted_count(getattr(p, "values", p)) for p in preds],
        dtype=np.float64,
    )
    truth = np.asarray(gts, dtype=np.float64)
    err = np.abs(counts - truth)
    return float(err.mean()), float(np.sqrt(np.mean(err ** 2)))


def _normalized_pair(pred, gt):
    p = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "values", gt), dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"map shapes differ: {p.shape} vs {g.shape}")
    peak = g.max()
    if peak <= 0:
        raise ValueError("reference map has no positive values")
    return p / peak, g / peak


def psnr(pred, gt):
    """Peak signal-to-noise ratio in dB after 1/max(gt) scaling of both maps.

    Identical maps return the 99 dB cap standing in for infinity.
    """
    p, g = _normalized_pair(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g1, g1)
    return win / win.sum()


def ssim(pred, gt):
    """Mean local SSIM over every valid Gaussian-weighted 11x11 window.

    Both maps are scaled by 1/max(gt) first, so the dynamic range is 1.
    """
    p, g = _normalized_pair(pred, gt)
    if min(p.shape) < SSIM_WINDOW:
        raise ValueError(f"maps must be at least {SSIM_WINDOW} pixels per side, got {p.shape}")
    win = _gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    def filt(a):
        view = np.lib.stride_tricks.sliding_window_view(a, win.shape)
        return np.einsum("ijkl,kl->ij", view, win)

    mu_p = filt(p)
    mu_g = filt(g)
    var_p = filt(p * p) - mu_p ** 2
    var_g = filt(g * g) - mu_g ** 2
    cov = filt(p * g) - mu_p * mu_g
    score = ((2 * mu_p * mu_g + c1) * (2 * cov + c2)) / (
        (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
    )
    return float(score.mean())
