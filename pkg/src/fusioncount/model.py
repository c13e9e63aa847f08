"""The counting network: backbone, fused two-column blocks, prediction heads.

The backbone reduces the image to stride-8 features.  A cascade of
two-column blocks follows; inside each block the columns trade features
through a channel-affinity mixer, emit a one-channel density sketch for
intermediate supervision, and re-inject that sketch into the feature
stream.  Three sibling heads read the x2-upsampled features: a density
map and the probability/bias pair consumed by soft binarization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CONFIG_PREFIX = "__cfg__."


@dataclass
class ModelConfig:
    backbone_channels: tuple[int, ...] = (16, 32, 48, 64)
    backbone_stride: int = 8
    block_count: int = 3
    block_channels: int = 64
    alpha_ifm: float = 0.3
    sdb_k: float = 500.0
    head_upsample: int = 2
    # the density head is trained against density_scale * ground truth and
    # predictions are divided back; raw unit-mass targets are far below the
    # activation noise floor of an unnormalized conv cascade
    density_scale: float = 100.0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.alpha_ifm < 0:
            raise ValueError(f"alpha_ifm must be >= 0, got {self.alpha_ifm}")
        if self.sdb_k <= 0:
            raise ValueError(f"sdb_k must be > 0, got {self.sdb_k}")
        if self.block_count < 1:
            raise ValueError(f"block_count must be >= 1, got {self.block_count}")
        if self.density_scale <= 0:
            raise ValueError(f"density_scale must be > 0, got {self.density_scale}")
        pools = len(self.backbone_channels) - 1
        if self.backbone_stride != 2 ** pools:
            raise ValueError(
                f"backbone_stride {self.backbone_stride} inconsistent with "
                f"{len(self.backbone_channels)} stages (expected {2 ** pools})"
            )


def tiny_config():
    """Smallest config that still exercises every code path; used by the
    gradient suite and fast tests."""
    return ModelConfig(backbone_channels=(4, 6, 6, 8), block_count=2, block_channels=8)


@dataclass
class ModelOutput:
    density: Tensor          # (n, 1, H/4, W/4), non-negative
    seg_prob: Tensor         # (n, 1, H/4, W/4), raw
    seg_bias: Tensor         # (n, 1, H/4, W/4), raw
    intermediates: list      # block_count maps of (n, 1, H/8, W/8)


# ---------------------------------------------------------------------------
# parameters


def _conv_shapes(cfg: ModelConfig):
    chans = cfg.backbone_channels
    shapes = {}
    prev = 3
    for i, ch in enumerate(chans):
        shapes[f"backbone.{i}.w"] = (ch, prev, 3, 3)
        shapes[f"backbone.{i}.b"] = (ch,)
        prev = ch
    bc = cfg.block_channels
    shapes["entry.w"] = (bc, prev, 1, 1)
    shapes["entry.b"] = (bc,)
    for k in range(cfg.block_count):
        p = f"block{k}"
        for col in ("col1", "col2"):
            shapes[f"{p}.{col}_in.w"] = (bc, bc, 1, 1)
            shapes[f"{p}.{col}_in.b"] = (bc,)
            shapes[f"{p}.{col}_conv.w"] = (bc, bc, 3, 3)
            shapes[f"{p}.{col}_conv.b"] = (bc,)
            shapes[f"{p}.{col}_mix.w"] = (bc, bc, 3, 3)
            shapes[f"{p}.{col}_mix.b"] = (bc,)
            shapes[f"{p}.{col}_out.w"] = (bc, bc, 3, 3)
            shapes[f"{p}.{col}_out.b"] = (bc,)
        shapes[f"{p}.merge.w"] = (bc, 2 * bc, 1, 1)
        shapes[f"{p}.merge.b"] = (bc,)
        shapes[f"{p}.mid_head.w"] = (1, bc, 1, 1)
        shapes[f"{p}.mid_head.b"] = (1,)
        shapes[f"{p}.lift.w"] = (bc, 1, 1, 1)
        shapes[f"{p}.lift.b"] = (bc,)
    for head in ("density", "seg_p", "seg_b"):
        shapes[f"head_{head}.w"] = (1, bc, 1, 1)
        shapes[f"head_{head}.b"] = (1,)
    return shapes


def config_entries(cfg: ModelConfig) -> dict[str, Tensor]:
    """Config knobs encoded as named scalar tensors so checkpoints are
    self-describing."""
    return {
        CONFIG_PREFIX + "backbone_channels": Tensor(np.array(cfg.backbone_channels, dtype=np.float32)),
        CONFIG_PREFIX + "backbone_stride": Tensor(np.float32(cfg.backbone_stride)),
        CONFIG_PREFIX + "block_count": Tensor(np.float32(cfg.block_count)),
        CONFIG_PREFIX + "block_channels": Tensor(np.float32(cfg.block_channels)),
        CONFIG_PREFIX + "alpha_ifm": Tensor(np.float32(cfg.alpha_ifm)),
        CONFIG_PREFIX + "sdb_k": Tensor(np.float32(cfg.sdb_k)),
        CONFIG_PREFIX + "head_upsample": Tensor(np.float32(cfg.head_upsample)),
        CONFIG_PREFIX + "density_scale": Tensor(np.float32(cfg.density_scale)),
    }


def config_from_params(params) -> ModelConfig:
    def scalar(name):
        # checkpoints hold float32; round back to the intended decimal
        return float(f"{params[CONFIG_PREFIX + name].data.item():.7g}")

    return ModelConfig(
        backbone_channels=tuple(
            int(v) for v in np.atleast_1d(params[CONFIG_PREFIX + "backbone_channels"].data)
        ),
        backbone_stride=int(scalar("backbone_stride")),
        block_count=int(scalar("block_count")),
        block_channels=int(scalar("block_channels")),
        alpha_ifm=scalar("alpha_ifm"),
        sdb_k=scalar("sdb_k"),
        head_upsample=int(scalar("head_upsample")),
        density_scale=scalar("density_scale"),
    )


def trainable(params):
    """Iterate (name, tensor) pairs that the optimizer should touch."""
    return ((n, t) for n, t in params.items() if not n.startswith(CONFIG_PREFIX))


def xavier_init(params, rng_seed=0):
    """Fill weights uniform in +-sqrt(6/(fan_in+fan_out)); zero biases.

    Deterministic for a fixed seed and parameter order.
    """
    rng = np.random.default_rng(rng_seed)
    for name, tensor in trainable(params):
        if name.endswith(".b"):
            tensor.data[...] = 0.0
            continue
        shape = tensor.data.shape
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in = shape[1] * receptive
        fan_out = shape[0] * receptive
        bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
        tensor.data[...] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def init_params(cfg: ModelConfig, rng_seed=0) -> dict[str, Tensor]:
    params = {
        name: Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        for name, shape in _conv_shapes(cfg).items()
    }
    xavier_init(params, rng_seed)
    params.update(config_entries(cfg))
    return params


# ---------------------------------------------------------------------------
# forward passes


def backbone_forward(image, params, cfg: ModelConfig):
    """Stride-8 feature extractor: conv+relu stages with 2x pooling between."""
    n, c, h, w = image.shape
    if h % 16 or w % 16:
        raise ValueError(f"input dims must be divisible by 16, got {h}x{w}")
    x = image
    last = len(cfg.backbone_channels) - 1
    for i in range(len(cfg.backbone_channels)):
        x = ad.relu(ad.conv2d(x, params[f"backbone.{i}.w"], params[f"backbone.{i}.b"], pad=1))
        if i < last:
            x = ad.avgpool2(x)
    return x


def information_fusion(x1, x2, conv1_w, conv1_b, conv2_w, conv2_b, alpha,
                       return_weights=False):
    """Cross-column mixer.

    Each column is convolved, pooled 2x and flattened to per-channel
    signatures; the product of one column's signatures with the other's
    gives a channel-affinity matrix, row-softmaxed into mixing weights.
    Column i's output is alpha times the other column's convolved
    features remixed by column i's weights.
    """
    if x1.shape != x2.shape:
        raise ValueError(f"column shapes differ: {x1.shape} vs {x2.shape}")
    n, c, h, w = x1.shape
    if h % 2 or w % 2:
        raise ValueError(f"column dims must be even for pooling, got {h}x{w}")
    fc1 = ad.conv2d(x1, conv1_w, conv1_b, pad=1)
    fc2 = ad.conv2d(x2, conv2_w, conv2_b, pad=1)
    d1 = ad.reshape(ad.avgpool2(fc1), (n, c, (h // 2) * (w // 2)))
    d2 = ad.reshape(ad.avgpool2(fc2), (n, c, (h // 2) * (w // 2)))
    w1 = ad.softmax_rows(ad.matmul(d1, ad.mat_t(d2)))
    w2 = ad.softmax_rows(ad.matmul(d2, ad.mat_t(d1)))
    f1 = ad.mul(ad.reshape(ad.matmul(w1, ad.reshape(fc2, (n, c, h * w))), (n, c, h, w)), alpha)
    f2 = ad.mul(ad.reshape(ad.matmul(w2, ad.reshape(fc1, (n, c, h * w))), (n, c, h, w)), alpha)
    if return_weights:
        return f1, f2, w1, w2
    return f1, f2


def basic_block_forward(x, params, cfg: ModelConfig, prefix):
    """One two-column stage; returns (features, one-channel density sketch)."""
    p = lambda name: params[f"{prefix}.{name}"]
    s1 = ad.conv2d(x, p("col1_in.w"), p("col1_in.b"))
    s2 = ad.conv2d(x, p("col2_in.w"), p("col2_in.b"))
    t1 = ad.relu(ad.conv2d(s1, p("col1_conv.w"), p("col1_conv.b"), pad=1))
    t2 = ad.relu(ad.conv2d(s2, p("col2_conv.w"), p("col2_conv.b"), pad=1))
    f1, f2 = information_fusion(
        t1, t2, p("col1_mix.w"), p("col1_mix.b"), p("col2_mix.w"), p("col2_mix.b"),
        cfg.alpha_ifm,
    )
    o1 = ad.add(f1, t1)
    o2 = ad.add(f2, t2)
    u1 = ad.conv2d(o1, p("col1_out.w"), p("col1_out.b"), pad=1)
    u2 = ad.conv2d(o2, p("col2_out.w"), p("col2_out.b"), pad=1)
    merged = ad.conv2d(ad.concat([u1, u2], axis=1), p("merge.w"), p("merge.b"))
    sketch = ad.conv2d(merged, p("mid_head.w"), p("mid_head.b"))
    features = ad.add(merged, ad.conv2d(sketch, p("lift.w"), p("lift.b")))
    return features, sketch


def soft_binarize(prob, bias, k):
    """Sigmoid of k*(prob - bias): a differentiable, steep step function.

    Larger k sharpens the transition; the underlying exponent is clamped
    so extreme k stays numerically safe.
    """
    if prob.shape != bias.shape:
        raise ValueError(f"map shapes differ: {prob.shape} vs {bias.shape}")
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    return ad.sigmoid(ad.mul(ad.sub(prob, bias), float(k)))


def model_forward(image, params, cfg: ModelConfig) -> ModelOutput:
    """Full forward pass; see ModelOutput for shapes."""
    feats = backbone_forward(image, params, cfg)
    feats = ad.conv2d(feats, params["entry.w"], params["entry.b"])
    intermediates = []
    for k in range(cfg.block_count):
        feats, sketch = basic_block_forward(feats, params, cfg, f"block{k}")
        intermediates.append(sketch)
    up = ad.upsample2(feats)
    density = ad.relu(ad.conv2d(up, params["head_density.w"], params["head_density.b"]))
    seg_prob = ad.conv2d(up, params["head_seg_p.w"], params["head_seg_p.b"])
    seg_bias = ad.conv2d(up, params["head_seg_b.w"], params["head_seg_b.b"])
    return ModelOutput(density, seg_prob, seg_bias, intermediates)
