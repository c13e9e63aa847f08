"""Optimization loop, whole-image inference and model evaluation.

Training follows the recipe the defaults encode: Adam at 5e-5 halved
every 1000 epochs, batches of 16 random 224-crops with horizontal flips
and color jitter.  Density supervision happens at the head resolutions:
stride-8 for the per-block sketches, stride-4 for the final map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import NumericalError
from .groundtruth import (
    AugmentSpec,
    DensityMap,
    PointAnnotation,
    augment,
    downsample_sum,
    generate_density_map,
    make_seg_mask,
    resize_dims,
    DEFAULT_SEG_TAU,
    DEFAULT_SIGMA,
)
from .losses import LossWeights, bce_seg_loss, intermediate_loss, mse_loss, total_loss
from .metrics import MetricReport, evaluate_counts, predicted_count, psnr, ssim
from .model import ModelConfig, model_forward, soft_binarize, trainable


@dataclass
class TrainConfig:
    lr: float = 5e-5
    lr_halve_every: int = 1000
    lr_warmup: int = 0  # epochs of linear ramp before the base rate
    batch: int = 16
    crop: int = 224
    epochs: int = 100
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    sigma: float = DEFAULT_SIGMA
    seg_tau: float = DEFAULT_SEG_TAU
    hflip_prob: float = 0.5
    brightness_range: tuple[float, float] = (0.9, 1.1)
    saturation_range: tuple[float, float] = (0.9, 1.1)
    intermediate_supervision: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.crop % 16:
            raise ValueError(f"crop must be divisible by 16, got {self.crop}")

    def augment_spec(self):
        return AugmentSpec(
            crop=self.crop,
            hflip_prob=self.hflip_prob,
            brightness_range=self.brightness_range,
            saturation_range=self.saturation_range,
        )


# images are stored in [0, 1]; the network consumes standardized values
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


def standardize_image(img):
    return ((np.asarray(img, dtype=np.float32) - IMAGE_MEAN) / IMAGE_STD)


@dataclass
class TrainSample:
    image: np.ndarray            # float32 HxWx3 in [0, 1]
    annotation: PointAnnotation
    density: DensityMap          # full-resolution ground truth


def build_sample(image, annotation, sigma=DEFAULT_SIGMA):
    return TrainSample(image, annotation, generate_density_map(annotation, sigma))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with bias correction; mutates and returns the inputs.

    Rejects the whole step if any gradient is non-finite.
    """
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}; step rejected")
    state.step += 1
    t = state.step
    scale = lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= (scale * m / (np.sqrt(v) + eps)).astype(
            params[name].data.dtype
        )
    return params, state


# ---------------------------------------------------------------------------
# batch assembly


def _prepare_batch(samples, cfg: TrainConfig, model_cfg: ModelConfig, epoch, indices):
    images, gt4, gt8, masks = [], [], [], []
    spec = cfg.augment_spec()
    scale = model_cfg.density_scale
    for sample, idx in zip(samples, indices):
        img, den, _ = augment(
            sample.image, sample.density, None, spec, rng_seed=[cfg.seed, epoch, idx]
        )
        den4 = downsample_sum(den, 4)
        den8 = downsample_sum(den, 8)
        images.append(standardize_image(img).transpose(2, 0, 1))
        gt4.append(den4.values[None] * scale)
        # stride-8 cells hold 4x the mass of stride-4 cells; dividing keeps
        # the auxiliary targets in the same numeric range as the final head
        gt8.append(den8.values[None] * (scale / 4.0))
        masks.append(make_seg_mask(den4, cfg.seg_tau)[None])
    return (
        Tensor(np.stack(images)),
        Tensor(np.stack(gt4)),
        Tensor(np.stack(gt8)),
        np.stack(masks),
    )


def batch_losses(params, model_cfg: ModelConfig, images, gt4, gt8, masks,
                 cfg: TrainConfig):
    out = model_forward(images, params, model_cfg)
    inters = out.intermediates if cfg.intermediate_supervision else []
    l_i = intermediate_loss(inters, gt8)
    l_c = mse_loss(out.density, gt4)
    l_s = bce_seg_loss(out.seg_prob, out.seg_bias, masks, model_cfg.sdb_k)
    values = [t.item() for t in (l_i, l_c, l_s)]
    if not np.all(np.isfinite(values)):
        raise NumericalError(
            f"non-finite loss components: inter={values[0]}, count={values[1]}, "
            f"seg={values[2]}"
        )
    total = total_loss(l_i, l_c, l_s, cfg.weights)
    return total, l_i, l_c, l_s


def learning_rate(cfg: TrainConfig, epoch):
    base = cfg.lr * 0.5 ** (epoch // cfg.lr_halve_every)
    if cfg.lr_warmup and epoch < cfg.lr_warmup:
        return base * (epoch + 1) / cfg.lr_warmup
    return base


def train(params, model_cfg: ModelConfig, dataset, cfg: TrainConfig,
          log_every=0):
    """Optimize ``params`` on ``dataset``; returns (params, history).

    ``history`` holds one record per epoch with the learning rate and the
    epoch-mean loss components.  Aborts with NumericalError on NaN loss.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    history = []
    state = AdamState()
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        rng = np.random.default_rng([cfg.seed, 7919, epoch])
        order = rng.permutation(len(dataset))
        sums = np.zeros(4, dtype=np.float64)
        batches = 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            images, gt4, gt8, masks = _prepare_batch(
                [dataset[i] for i in idx], cfg, model_cfg, epoch, idx.tolist()
            )
            total, l_i, l_c, l_s = batch_losses(
                params, model_cfg, images, gt4, gt8, masks, cfg
            )
            values = [t.item() for t in (total, l_i, l_c, l_s)]
            if not np.all(np.isfinite(values)):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}: total={values[0]}, "
                    f"inter={values[1]}, count={values[2]}, seg={values[3]}"
                )
            total.backward()
            grads = {n: t.grad for n, t in trainable(params) if t.grad is not None}
            adam_step(params, grads, state, lr, cfg.betas, cfg.eps)
            for _, t in trainable(params):
                t.grad = None
            sums += values
            batches += 1
        means = sums / max(batches, 1)
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss_total": means[0],
                "loss_I": means[1],
                "loss_C": means[2],
                "loss_S": means[3],
            }
        )
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}: lr={lr:.2e} loss={means[0]:.5f}")
    return params, history


def write_history_csv(path, history):
    with open(path, "w") as f:
        f.write("epoch,lr,loss_total,loss_I,loss_C,loss_S\n")
        for row in history:
            f.write(
                f"{row['epoch']},{row['lr']:.10g},{row['loss_total']:.10g},"
                f"{row['loss_I']:.10g},{row['loss_C']:.10g},{row['loss_S']:.10g}\n"
            )


# ---------------------------------------------------------------------------
# inference and evaluation


def infer(image, params, model_cfg: ModelConfig):
    """Whole-image inference on a float [0,1] HxWx3 array.

    The image is snapped to the training grid first.  Returns
    (DensityMap at stride 4, count, binary crowd mask).
    """
    from .fileio import resize_image_and_points

    h, w = image.shape[:2]
    h2, w2 = resize_dims(h, w)
    if (h2, w2) != (h, w):
        image, _ = resize_image_and_points(
            image, PointAnnotation(np.empty((0, 2)), (h, w)), (h2, w2)
        )
    x = Tensor(standardize_image(image).transpose(2, 0, 1)[None])
    out = model_forward(x, params, model_cfg)
    density = DensityMap(
        out.density.data[0, 0] / model_cfg.density_scale, resolution_divisor=4
    )
    count = predicted_count(density.values)
    mask = (
        soft_binarize(out.seg_prob, out.seg_bias, model_cfg.sdb_k).data[0, 0] > 0.5
    ).astype(np.float32)
    return density, count, mask


def evaluate_model(params, model_cfg: ModelConfig, samples, sigma=DEFAULT_SIGMA):
    """MetricReport over (image, annotation) evaluation pairs.

    Counts come from the density head; PSNR/SSIM compare the predicted
    stride-4 map against sum-pooled ground truth and skip images whose
    ground truth is empty.
    """
    from .fileio import resize_image_and_points

    pred_counts, gt_counts, psnrs, ssims = [], [], [], []
    for image, ann in samples:
        h, w = image.shape[:2]
        h2, w2 = resize_dims(h, w)
        if (h2, w2) != (h, w):
            image, ann = resize_image_and_points(image, ann, (h2, w2))
        density, count, _ = infer(image, params, model_cfg)
        pred_counts.append(count)
        gt_counts.append(ann.count)
        if ann.count > 0:
            gt4 = downsample_sum(generate_density_map(ann, sigma), 4)
            if min(gt4.values.shape) >= 11:
                psnrs.append(psnr(density, gt4))
                ssims.append(ssim(density, gt4))
    mae, mse = evaluate_counts(pred_counts, gt_counts)
    return MetricReport(
        mae=mae,
        mse=mse,
        psnr=float(np.mean(psnrs)) if psnrs else float("nan"),
        ssim=float(np.mean(ssims)) if ssims else float("nan"),
    )
