"""Crowd counting with cross-column information fusion.

A desk-scale, fully testable counting network: differentiable tensor
primitives with a finite-difference oracle, a point-annotation ground
truth pipeline, a two-column fused architecture with intermediate
supervision and soft binarization heads, training and evaluation
tooling, and an sklearn-style estimator facade.
"""

from .autodiff import Tensor, grad_check
from .estimator import CrowdCounter
from .groundtruth import (
    DensityMap,
    PointAnnotation,
    downsample_sum,
    generate_density_map,
    make_seg_mask,
    resize_dims,
)
from .losses import LossWeights, bce_seg_loss, intermediate_loss, mse_loss, total_loss
from .metrics import MetricReport, evaluate_counts, psnr, ssim
from .model import ModelConfig, init_params, model_forward, soft_binarize, tiny_config
from .synthetic import SceneSpec, synth_scene
from .training import TrainConfig, adam_step, evaluate_model, infer, train

__version__ = "0.1.0"

__all__ = [
    "CrowdCounter",
    "DensityMap",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "PointAnnotation",
    "SceneSpec",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "bce_seg_loss",
    "downsample_sum",
    "evaluate_counts",
    "evaluate_model",
    "generate_density_map",
    "grad_check",
    "infer",
    "init_params",
    "intermediate_loss",
    "make_seg_mask",
    "model_forward",
    "mse_loss",
    "psnr",
    "resize_dims",
    "soft_binarize",
    "ssim",
    "synth_scene",
    "tiny_config",
    "total_loss",
    "train",
]
