"""Windowed multi-head self-attention with optional cyclic shift.

Token grids travel channel-last as ``[N, H, W, C]``.  Windows are
non-overlapping ``M x M`` tiles flattened to ``M*M`` tokens; the shifted
variant rolls the grid by ``-s`` first and masks pairs of tokens that were
not neighbours before the roll.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import Linear, Module
from .tensor import ShapeError

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 7
    shift: int = 0
    num_heads: int = 1
    head_dim: int = 32

    def __post_init__(self):
        if self.window_size < 1 or self.num_heads < 1 or self.head_dim < 1:
            raise ValueError("window_size, num_heads and head_dim must be positive")
        if not 0 <= self.shift < self.window_size:
            raise ValueError(f"shift must lie in [0, {self.window_size}), got {self.shift}")

    @property
    def dim(self):
        return self.num_heads * self.head_dim


# --------------------------------------------------------- grid regrouping


def window_partition(x, window_size):
    """[N,H,W,C] -> [N*(H/M)*(W/M), M*M, C], windows in row-major order."""
    n, h, w, c = x.shape
    m = window_size
    if h % m or w % m:
        raise ShapeError(f"window size {m} does not divide grid {h}x{w}; pad first")
    x = x.reshape(n, h // m, m, w // m, m, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n * (h // m) * (w // m), m * m, c)


def window_reverse(windows, window_size, h, w):
    """Inverse of :func:`window_partition`."""
    m = window_size
    nw, length, c = windows.shape
    if h % m or w % m or length != m * m:
        raise ShapeError(f"windows {windows.shape} inconsistent with grid {h}x{w}, M={m}")
    per_image = (h // m) * (w // m)
    if nw % per_image:
        raise ShapeError(f"{nw} windows is not a multiple of {per_image} per image")
    n = nw // per_image
    x = windows.reshape(n, h // m, w // m, m, m, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, w, c)


def cyclic_shift(x, shift, inverse=False):
    """Roll rows and columns of [N,H,W,C] by ``-shift`` (``+shift`` if inverse)."""
    if shift == 0:
        return x
    if not 0 <= shift < min(x.shape[1], x.shape[2]):
        raise ShapeError(f"shift {shift} out of range for grid {x.shape[1]}x{x.shape[2]}")
    s = shift if inverse else -shift
    return ops.roll(x, (s, s), (1, 2))


# ------------------------------------------------------- bias & masking


def relative_position_index(window_size):
    """[M*M, M*M] map from token pair to row of the (2M-1)^2 bias table."""
    m = window_size
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


def build_shift_mask(h, w, window_size, shift):
    """Additive mask [num_windows, M*M, M*M] with entries 0 or MASK_VALUE.

    Regions are labelled on the rolled grid by the slices
    ``[0, -M)``, ``[-M, -s)``, ``[-s, end)`` along each axis; token pairs
    with different labels may not attend to each other.
    """
    m = window_size
    num_windows = (h // m) * (w // m)
    if shift == 0:
        return np.zeros((num_windows, m * m, m * m))
    regions = region_ids(h, w, m, shift)
    windows = regions.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = windows[:, :, None] != windows[:, None, :]
    return np.where(diff, MASK_VALUE, 0.0)


def region_ids(h, w, window_size, shift):
    m, s = window_size, shift
    labels = np.zeros((h, w), dtype=np.int64)
    cuts = (slice(0, -m), slice(-m, -s), slice(-s, None))
    rid = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = rid
            rid += 1
    return labels


def wmsa_complexity(h, w, c, m):
    """Attention-core cost ``4hwC^2 + 2 M^2 hwC`` (softmax not counted)."""
    for v in (h, w, c, m):
        if int(v) != v or v < 1:
            raise ValueError("wmsa_complexity takes positive integers")
    h, w, c, m = int(h), int(w), int(c), int(m)
    return 4 * h * w * c * c + 2 * m * m * h * w * c


# ------------------------------------------------------------ attention


class WindowAttention(Module):
    """Per-window multi-head attention with a learned relative position bias.

    Input and output are ``[num_windows*N, M*M, C]``.  After each call the
    attention weights are kept on ``last_weights`` ([B, heads, L, L]) for
    inspection.
    """

    def __init__(self, dim, window_size, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ShapeError(f"dim {dim} is not divisible by {num_heads} heads")
        self.dim, self.window_size, self.num_heads = dim, window_size, num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.add_param("relative_position_bias_table",
                       ((2 * window_size - 1) ** 2, num_heads), "trunc_normal", 0.02)
        self.relative_position_index = relative_position_index(window_size)
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)
        self.last_weights = None

    def relative_bias(self):
        """[heads, L, L] bias gathered from the table."""
        length = self.window_size ** 2
        b = ops.take_rows(self.relative_position_bias_table, self.relative_position_index)
        return b.reshape(length, length, self.num_heads).permute(2, 0, 1)

    def forward(self, x, mask=None):
        bw, length, c = x.shape
        if c != self.dim or length != self.window_size ** 2:
            raise ShapeError(f"window attention expects [*, {self.window_size ** 2}, {self.dim}], got {x.shape}")
        h, d = self.num_heads, self.head_dim
        qkv = self.qkv(x).reshape(bw, length, 3, h, d).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ops.matmul(q * self.scale, k.transpose(-2, -1))
        scores = scores + self.relative_bias().reshape(1, h, length, length)
        if mask is not None:
            nw = mask.shape[0]
            if bw % nw:
                raise ShapeError(f"{bw} windows not a multiple of mask windows {nw}")
            scores = scores.reshape(bw // nw, nw, h, length, length)
            scores = scores + np.asarray(mask, dtype=x.dtype)[None, :, None]
            scores = scores.reshape(bw, h, length, length)
        attn = ops.softmax(scores)
        self.last_weights = attn.data
        out = ops.matmul(attn, v).permute(0, 2, 1, 3).reshape(bw, length, c)
        return self.proj(out)


def shifted_window_attention(attn, x, shift):
    """Run ``attn`` (a :class:`WindowAttention`) over a [N,H,W,C] grid.

    Pads bottom/right to a multiple of the window, rolls by ``shift`` and
    applies the region mask when ``shift > 0``, then undoes all three.
    """
    n, h, w, c = x.shape
    m = attn.window_size
    pad_h, pad_w = (-h) % m, (-w) % m
    if pad_h or pad_w:
        x = ops.pad(x, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    hp, wp = h + pad_h, w + pad_w
    mask = None
    if shift > 0:
        x = cyclic_shift(x, shift)
        mask = build_shift_mask(hp, wp, m, shift)
    windows = window_partition(x, m)
    windows = attn(windows, mask=mask)
    x = window_reverse(windows, m, hp, wp)
    if shift > 0:
        x = cyclic_shift(x, shift, inverse=True)
    if pad_h or pad_w:
        x = x[:, :h, :w, :]
    return x
