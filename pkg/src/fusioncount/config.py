"""Flat key=value config files mapping onto the model/train dataclasses.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Unknown keys are rejected so typos cannot silently fall back to
defaults.
"""

from __future__ import annotations

from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


def _int_tuple(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _float_pair(text):
    parts = [float(v) for v in text.replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError(f"expected two values, got {text!r}")
    return tuple(parts)


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


MODEL_KEYS = {
    "backbone_channels": _int_tuple,
    "backbone_stride": int,
    "block_count": int,
    "block_channels": int,
    "alpha_ifm": float,
    "sdb_k": float,
    "head_upsample": int,
    "density_scale": float,
}

TRAIN_KEYS = {
    "lr": float,
    "lr_halve_every": int,
    "lr_warmup": int,
    "batch": int,
    "crop": int,
    "epochs": int,
    "seed": int,
    "eps": float,
    "sigma": float,
    "seg_tau": float,
    "hflip_prob": float,
    "brightness_range": _float_pair,
    "saturation_range": _float_pair,
    "betas": _float_pair,
    "intermediate_supervision": _bool,
}

LOSS_KEYS = {
    "alpha_loss": float,
    "lambda_seg": float,
    "denom": float,
}


def parse_config_text(text):
    """Parse config text into (ModelConfig, TrainConfig)."""
    model_kwargs, train_kwargs, loss_kwargs = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in MODEL_KEYS:
            model_kwargs[key] = MODEL_KEYS[key](value)
        elif key in TRAIN_KEYS:
            train_kwargs[key] = TRAIN_KEYS[key](value)
        elif key in LOSS_KEYS:
            loss_kwargs[key] = LOSS_KEYS[key](value)
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    if loss_kwargs:
        train_kwargs["weights"] = LossWeights(**loss_kwargs)
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def load_config(path):
    with open(path) as f:
        return parse_config_text(f.read())


def config_snapshot(model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Flat dict of every knob, for manifests."""
    snap = {
        "backbone_channels": list(model_cfg.backbone_channels),
        "backbone_stride": model_cfg.backbone_stride,
        "block_count": model_cfg.block_count,
        "block_channels": model_cfg.block_channels,
        "alpha_ifm": model_cfg.alpha_ifm,
        "sdb_k": model_cfg.sdb_k,
        "head_upsample": model_cfg.head_upsample,
        "density_scale": model_cfg.density_scale,
        "lr": train_cfg.lr,
        "lr_halve_every": train_cfg.lr_halve_every,
        "lr_warmup": train_cfg.lr_warmup,
        "batch": train_cfg.batch,
        "crop": train_cfg.crop,
        "epochs": train_cfg.epochs,
        "seed": train_cfg.seed,
        "betas": list(train_cfg.betas),
        "eps": train_cfg.eps,
        "sigma": train_cfg.sigma,
        "seg_tau": train_cfg.seg_tau,
        "hflip_prob": train_cfg.hflip_prob,
        "brightness_range": list(train_cfg.brightness_range),
        "saturation_range": list(train_cfg.saturation_range),
        "intermediate_supervision": train_cfg.intermediate_supervision,
        "alpha_loss": train_cfg.weights.alpha_loss,
        "lambda_seg": train_cfg.weights.lambda_seg,
        "denom": train_cfg.weights.denom,
    }
    return snap
