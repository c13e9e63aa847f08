"""Scikit-learn style estimator wrapping the full train/predict pipeline.

``X`` is a sequence of images (HxW or HxWx3, uint8 or float in [0, 1])
and ``y`` a matching sequence of (n_i, 2) head-coordinate arrays.  After
``fit``, ``predict`` returns one count per image.  The estimator is
clonable and grid-searchable: constructor arguments are stored verbatim
and all fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .groundtruth import PointAnnotation
from .losses import LossWeights
from .model import ModelConfig, init_params
from .training import TrainConfig, build_sample, evaluate_model, infer, train
from .validation import check_image_list, check_points


class CrowdCounter(BaseEstimator, RegressorMixin):
    """Density-map crowd counter with cross-column feature fusion."""

    def __init__(self, backbone_channels=(16, 32, 48, 64), block_count=3,
                 block_channels=64, alpha_ifm=0.3, sdb_k=500.0,
                 density_scale=100.0, lr=5e-5, lr_halve_every=1000,
                 lr_warmup=0, batch=16, crop=224, epochs=100, sigma=4.0,
                 lambda_seg=0.005, intermediate_supervision=True, seed=0):
        self.backbone_channels = backbone_channels
        self.block_count = block_count
        self.block_channels = block_channels
        self.alpha_ifm = alpha_ifm
        self.sdb_k = sdb_k
        self.density_scale = density_scale
        self.lr = lr
        self.lr_halve_every = lr_halve_every
        self.lr_warmup = lr_warmup
        self.batch = batch
        self.crop = crop
        self.epochs = epochs
        self.sigma = sigma
        self.lambda_seg = lambda_seg
        self.intermediate_supervision = intermediate_supervision
        self.seed = seed

    def _configs(self):
        model_cfg = ModelConfig(
            backbone_channels=tuple(self.backbone_channels),
            block_count=self.block_count,
            block_channels=self.block_channels,
            alpha_ifm=self.alpha_ifm,
            sdb_k=self.sdb_k,
            density_scale=self.density_scale,
        )
        train_cfg = TrainConfig(
            lr=self.lr,
            lr_halve_every=self.lr_halve_every,
            lr_warmup=self.lr_warmup,
            batch=self.batch,
            crop=self.crop,
            epochs=self.epochs,
            seed=self.seed,
            sigma=self.sigma,
            weights=LossWeights(lambda_seg=self.lambda_seg),
            intermediate_supervision=self.intermediate_supervision,
        )
        return model_cfg, train_cfg

    def fit(self, X, y):
        images = check_image_list(X)
        if len(images) != len(y):
            raise ValueError(f"{len(images)} images but {len(y)} annotations")
        samples = []
        for img, pts in zip(images, y):
            ann = PointAnnotation(check_points(pts, img.shape), img.shape[:2])
            samples.append(build_sample(img, ann, sigma=self.sigma))
        model_cfg, train_cfg = self._configs()
        params = init_params(model_cfg, self.seed)
        params, history = train(params, model_cfg, samples, train_cfg)
        self.params_ = params
        self.model_config_ = model_cfg
        self.history_ = history
        return self

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this CrowdCounter is not fitted yet; call fit first")

    def predict(self, X):
        """Predicted person count for each image."""
        self._require_fitted()
        images = check_image_list(X)
        return np.array(
            [infer(img, self.params_, self.model_config_)[1] for img in images]
        )

    def predict_density(self, X):
        """Stride-4 DensityMap for each image."""
        self._require_fitted()
        images = check_image_list(X)
        return [infer(img, self.params_, self.model_config_)[0] for img in images]

    def score(self, X, y):
        """Negative count MAE (larger is better, sklearn convention)."""
        self._require_fitted()
        images = check_image_list(X)
        pairs = [
            (img, PointAnnotation(check_points(pts, img.shape), img.shape[:2]))
            for img, pts in zip(images, y)
        ]
        report = evaluate_model(self.params_, self.model_config_, pairs, self.sigma)
        return -report.mae
