"""The LDCSF network.

Layout (default 224 px input, patch 4)::

    patch embed          56x56 tokens, C
    stage 1  swin x d1 -> LDC -> FR -> merge     28x28, 2C
    stage 2  swin x d2 -> LDC -> FR -> merge     14x14, 4C
    stage 3  swin x d3 -> LDC -> FR -> merge      7x7,  8C
    stage 4  swin x d4
    head     two residual conv units -> GAP -> dropout -> linear(4)

LDC and FR can be switched off independently for ablations.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .attention import WindowAttention, shifted_window_attention
from .layers import (
    BatchNorm2d,
    Conv2d,
    DepthwiseConv2d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    img_to_seq,
    init_parameters,
    seq_to_img,
)
from .tensor import ShapeError, Tensor, make_rng

LABELS = ("interstitial_area", "necrosis", "non_tumor", "tumor")
# loss-term name -> logit column
LOSS_TERMS = (("l_i", 0), ("l_m", 2), ("l_t", 3), ("l_n", 1))


def default_heads(embed_dim, num_stages=4):
    """Swin-T head counts [3, 6, 12, 24] at C=96, i.e. 32 channels per head."""
    return [max(1, embed_dim * 2**i // 32) for i in range(num_stages)]


@dataclass
class ModelConfig:
    img_size: int = 224
    patch_size: int = 4
    embed_dim: int = 96
    depths: list = field(default_factory=lambda: [2, 2, 2, 2])
    num_heads: list = None
    window_size: int = 7
    mlp_ratio: int = 4
    ldc_enabled: bool = True
    fr_enabled: bool = True
    fr_reduction: int = 4
    ldc_kernel: int = 3
    ldc_expansion: int = 4
    num_labels: int = 4
    dropout_rate: float = 0.1
    head_units: int = 2

    def __post_init__(self):
        self.depths = list(self.depths)
        if self.num_heads is None:
            self.num_heads = default_heads(self.embed_dim, len(self.depths))
        self.num_heads = list(self.num_heads)
        self.validate()

    @classmethod
    def toy(cls, **overrides):
        """Desk-scale variant: 32 px input, C=8, window 2."""
        base = dict(img_size=32, patch_size=4, embed_dim=8, depths=[2, 2, 2, 2], window_size=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ValueError("LDCSF has exactly four transformer stages")
        if self.num_labels != 4:
            raise ValueError("num_labels is fixed at 4")
        if self.img_size % self.patch_size:
            raise ValueError("patch_size must divide img_size")
        grid = self.img_size // self.patch_size
        if grid % 8:
            raise ValueError(f"token grid {grid} must be divisible by 8 for three 2x2 merges")
        if any(d < 2 or d % 2 for d in self.depths):
            raise ValueError("stage depths must be even (W-MSA/SW-MSA alternation)")
        for i, (h, dim) in enumerate(zip(self.num_heads, self.stage_dims())):
            if dim % h:
                raise ValueError(f"stage {i + 1}: dim {dim} not divisible by {h} heads")
        if self.embed_dim % self.num_heads[0]:
            raise ValueError("embed_dim must be divisible by num_heads[0]")
        if self.fr_enabled:
            for dim in self.stage_dims()[:3]:
                if dim % self.fr_reduction:
                    raise ValueError(f"FR reduction {self.fr_reduction} does not divide dim {dim}")
        if self.ldc_kernel % 2 == 0:
            raise ValueError("ldc_kernel must be odd")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def stage_dims(self):
        return [self.embed_dim * 2**i for i in range(4)]

    def stage_sides(self):
        grid = self.img_size // self.patch_size
        return [grid // 2**i for i in range(4)]


@dataclass
class MultiLabelLoss:
    """Summed per-label loss; ``total`` is the differentiable tensor."""

    total: Tensor
    l_i: float
    l_m: float
    l_t: float
    l_n: float

    @property
    def L(self):  # noqa: N802 - matches the loss name used in logs
        return float(self.total.data)

    def as_dict(self):
        return {"L": self.L, "l_i": self.l_i, "l_m": self.l_m, "l_t": self.l_t, "l_n": self.l_n}


def sigmoid_scores(logits):
    """Numerically stable sigmoid of a logit array, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def multilabel_loss(logits, targets, weights=None):
    """Sum of four binary cross-entropies, one per label.

    ``weights`` (optional, keyed by loss-term name) rescales each term; unit
    weights are the default and reproduce the plain sum.
    """
    per_label = ops.bce_with_logits(logits, targets)
    terms = {}
    for name, col in LOSS_TERMS:
        term = per_label[col]
        if weights is not None and name in weights:
            term = term * float(weights[name])
        terms[name] = term
    total = terms["l_i"] + terms["l_m"] + terms["l_t"] + terms["l_n"]
    return MultiLabelLoss(total, *(float(terms[n].data) for n, _ in LOSS_TERMS))


# ------------------------------------------------------------------ blocks


class PatchEmbed(Module):
    def __init__(self, patch_size, embed_dim, in_ch=3):
        super().__init__()
        self.patch_size, self.in_ch = patch_size, in_ch
        self.proj = Linear(in_ch * patch_size * patch_size, embed_dim)
        self.norm = LayerNorm(embed_dim)

    def patches(self, img):
        """[N,3,H,W] -> [N, (H/p)*(W/p), 3*p*p] flattened (channel, row, col)."""
        n, c, h, w = img.shape
        p = self.patch_size
        if c != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} input channels, got {c}")
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch {p}")
        x = img.reshape(n, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(n, (h // p) * (w // p), c * p * p)

    def forward(self, img):
        return self.norm(self.proj(self.patches(img)))


class SwinBlock(Module):
    """Pre-norm attention + MLP block on a square token grid.

    When the grid is no larger than the window, the window shrinks to the
    grid and shifting is disabled (a single window already sees everything).
    """

    def __init__(self, dim, side, num_heads, window_size, shifted, mlp_ratio=4):
        super().__init__()
        self.dim, self.side, self.shifted = dim, side, shifted
        if side <= window_size:
            window_size, shift = side, 0
        else:
            shift = window_size // 2 if shifted else 0
        self.window_size, self.shift = window_size, shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim)
        self.fc2 = Linear(mlp_ratio * dim, dim)

    def forward(self, x):
        n, length, c = x.shape
        if length != self.side * self.side:
            raise ShapeError(f"{length} tokens do not form the {self.side}x{self.side} grid")
        y = self.norm1(x).reshape(n, self.side, self.side, c)
        y = shifted_window_attention(self.attn, y, self.shift).reshape(n, length, c)
        x = x + y
        return x + self.fc2(ops.gelu(self.fc1(self.norm2(x))))


class LocalDepthConv(Module):
    """Expand (1x1) -> depthwise kxk -> project (1x1) on the token map, plus skip."""

    def __init__(self, dim, kernel_size=3, expansion=4):
        super().__init__()
        hidden = expansion * dim
        self.expand = Conv2d(dim, hidden, 1)
        self.bn1 = BatchNorm2d(hidden)
        self.dw = DepthwiseConv2d(hidden, kernel_size)
        self.bn2 = BatchNorm2d(hidden)
        self.project = Conv2d(hidden, dim, 1)
        self.bn3 = BatchNorm2d(dim)

    def forward(self, tokens, side):
        fmap = seq_to_img(tokens, side)
        y = ops.h_swish(self.bn1(self.expand(fmap)))
        y = ops.h_swish(self.bn2(self.dw(y)))
        y = self.bn3(self.project(y))
        return img_to_seq(fmap + y)


class FeatureReconstruction(Module):
    """Squeeze (spatial mean) -> excitation gate -> channel-wise reweight."""

    def __init__(self, dim, reduction=4):
        super().__init__()
        if dim % reduction:
            raise ShapeError(f"dim {dim} not divisible by reduction {reduction}")
        self.fc1 = Linear(dim, dim // reduction)
        self.fc2 = Linear(dim // reduction, dim)
        self.last_gate = None

    def gate(self, fmap):
        z = ops.global_avg_pool(fmap)
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(z))))

    def forward(self, fmap):
        g = self.gate(fmap)
        self.last_gate = g.data
        n, c = g.shape
        return fmap * g.reshape(n, c, 1, 1)


class PatchMerging(Module):
    """Concatenate each 2x2 neighbourhood (4*dim), norm, project to 2*dim."""

    def __init__(self, dim):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, tokens, side):
        n, length, c = tokens.shape
        if length != side * side:
            raise ShapeError(f"{length} tokens do not form a {side}x{side} grid")
        if side % 2:
            raise ShapeError(f"patch merging needs an even grid side, got {side}")
        x = tokens.reshape(n, side, side, c)
        parts = [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :], x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]]
        x = ops.concat(parts, axis=-1).reshape(n, (side // 2) ** 2, 4 * c)
        return self.reduction(self.norm(x))


class ResidualUnit(Module):
    def __init__(self, dim):
        super().__init__()
        self.conv1 = Conv2d(dim, dim, 3)
        self.bn1 = BatchNorm2d(dim)
        self.conv2 = Conv2d(dim, dim, 3)
        self.bn2 = BatchNorm2d(dim)

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = ops.relu(self.bn2(self.conv2(y)))
        return x + y


class ResNetHead(Module):
    def __init__(self, dim, num_labels=4, units=2, dropout_rate=0.1):
        super().__init__()
        self.units = [ResidualUnit(dim) for _ in range(units)]
        self.dropout = Dropout(dropout_rate)
        self.fc = Linear(dim, num_labels)

    def forward(self, tokens, side):
        x = seq_to_img(tokens, side)
        for unit in self.units:
            x = unit(x)
        return self.fc(self.dropout(ops.global_avg_pool(x)))


class Stage(Module):
    def __init__(self, cfg, index):
        super().__init__()
        dim, side = cfg.stage_dims()[index], cfg.stage_sides()[index]
        self.dim, self.side = dim, side
        self.blocks = [
            SwinBlock(dim, side, cfg.num_heads[index], cfg.window_size, shifted=i % 2 == 1,
                      mlp_ratio=cfg.mlp_ratio)
            for i in range(cfg.depths[index])
        ]
        last = index == 3
        self.ldc = LocalDepthConv(dim, cfg.ldc_kernel, cfg.ldc_expansion) if cfg.ldc_enabled and not last else None
        self.fr = FeatureReconstruction(dim, cfg.fr_reduction) if cfg.fr_enabled and not last else None
        self.downsample = PatchMerging(dim) if not last else None

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        if self.ldc is not None:
            x = self.ldc(x, self.side)
        if self.fr is not None:
            x = img_to_seq(self.fr(seq_to_img(x, self.side)))
        return x


class LdcsfModel(Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim)
        self.stages = [Stage(cfg, i) for i in range(4)]
        self.head = ResNetHead(cfg.stage_dims()[3], cfg.num_labels, cfg.head_units, cfg.dropout_rate)
        self.trace = []
        init_parameters(self, seed)

    def set_dropout_rng(self, rng):
        self.head.dropout.rng = rng

    def reseed_dropout(self, *keys):
        self.set_dropout_rng(make_rng(self.seed, "dropout", *keys))

    def forward(self, img):
        img = img if isinstance(img, Tensor) else Tensor(img)
        n, c, h, w = img.shape
        if (h, w) != (self.cfg.img_size, self.cfg.img_size):
            raise ShapeError(f"model built for {self.cfg.img_size}px input, got {h}x{w}")
        x = self.patch_embed(img)
        self.trace = []
        for stage in self.stages:
            x = stage(x)
            self.trace.append(tuple(x.shape))
            if stage.downsample is not None:
                x = stage.downsample(x, stage.side)
        return self.head(x, self.stages[3].side)

    def predict_proba(self, img):
        return sigmoid_scores(self.forward(img).data)
