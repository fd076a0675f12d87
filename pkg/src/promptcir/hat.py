"""Hybrid attention groups: shifted-window attention in parallel with channel
attention, plus an overlapped cross-attention block.

The window size defaults to 8 so attention windows line up with the 8x8
block grid the compression artifacts live on. Groups reflect-pad internally
to a window multiple and crop afterwards, so they compose at any resolution.

Relative position bias tables are indexed by the canonical offset map
(query coord minus key coord, shifted to start at 0). For the overlapped
block the key window extends the query window by int(overlap_ratio * M) on
each side pair, and with overlap_ratio 0 its index table degenerates exactly
to the plain window-attention one.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList, param, trunc_normal
from .tensor import ShapeError

MASK_FILL = -1e4  # finite, but exp() underflows to exactly 0 in both dtypes


def window_partition(x, m):
    """[B,C,H,W] -> [B*nW, M*M, C]; windows row-major, pixels row-major."""
    b, c, h, w = x.shape
    if h % m or w % m:
        raise ShapeError(f"window_partition: {h}x{w} not divisible by window {m}")
    t = T.reshape(x, (b, c, h // m, m, w // m, m))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (b * (h // m) * (w // m), m * m, c))


def window_reverse(windows, m, b, h, w):
    """Inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    t = T.reshape(windows, (b, h // m, w // m, m, m, c))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))
    return T.reshape(t, (b, c, h, w))


def relative_position_index(m):
    """[M^2, M^2] table row index for each (query, key) offset."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    return (rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)


def oca_position_index(m, mo):
    """[M^2, Mo^2] index; key window is the query window padded by (Mo-M)/2."""
    p = (mo - m) // 2
    q = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    k = np.stack(np.meshgrid(np.arange(-p, m + p), np.arange(-p, m + p),
                             indexing="ij")).reshape(2, -1)
    rel = q[:, :, None] - k[:, None, :]
    return (rel[0] + m - 1 + p) * (m + mo - 1) + (rel[1] + m - 1 + p)


def shift_attention_mask(h, w, m, shift, dtype=np.float32):
    """Additive [nW, M^2, M^2] mask forbidding cross-region pairs after a
    cyclic shift; 0 where attention is allowed, MASK_FILL where not."""
    img = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
        for ws in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
            img[hs, ws] = cnt
            cnt += 1
    wins = img.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = wins[:, None, :] != wins[:, :, None]
    return np.where(diff, MASK_FILL, 0.0).astype(dtype)


class Mlp(Module):
    """Per-position two-layer MLP with GELU, applied channel-last."""

    def __init__(self, rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def forward(self, x):
        # x: [B,C,H,W] -> tokens on the trailing axis and back
        tokens = T.transpose(x, (0, 2, 3, 1))
        tokens = self.fc2(T.gelu(self.fc1(tokens)))
        return T.transpose(tokens, (0, 3, 1, 2))


class ChannelAttention(Module):
    """Squeeze-and-excitation gate over channels."""

    def __init__(self, rng, dim, squeeze_factor=30):
        hidden = max(1, dim // squeeze_factor)
        self.down = Conv2d(rng, dim, hidden, 1)
        self.up = Conv2d(rng, hidden, dim, 1)

    def forward(self, x):
        g = T.mean_(x, axis=(2, 3), keepdims=True)
        g = T.sigmoid(self.up(T.relu(self.down(g))))
        return T.mul(x, g)


class CAB(Module):
    """Conv block (compress, GELU, expand) followed by channel attention."""

    def __init__(self, rng, dim, compress_ratio=3, squeeze_factor=30):
        hidden = max(1, dim // compress_ratio)
        self.conv1 = Conv2d(rng, dim, hidden, 3, padding=1)
        self.conv2 = Conv2d(rng, hidden, dim, 3, padding=1)
        self.ca = ChannelAttention(rng, dim, squeeze_factor)

    def forward(self, x):
        return self.ca(self.conv2(T.gelu(self.conv1(x))))


class WindowAttention(Module):
    """Scaled dot-product attention inside M x M windows with learned
    relative position bias; optional additive mask for shifted layouts."""

    def __init__(self, rng, dim, heads, window, qkv_bias=True):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(rng, dim, dim * 3, bias=qkv_bias)
        self.proj = Linear(rng, dim, dim)
        self.bias_table = param(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        self._index = relative_position_index(window).reshape(-1)

    def forward(self, windows, mask=None):
        b_, n, c = windows.shape
        hd = c // self.heads
        qkv = T.reshape(self.qkv(windows), (b_, n, 3, self.heads, hd))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q = T.reshape(T.narrow(qkv, 0, 0, 1), (b_, self.heads, n, hd))
        k = T.reshape(T.narrow(qkv, 0, 1, 1), (b_, self.heads, n, hd))
        v = T.reshape(T.narrow(qkv, 0, 2, 1), (b_, self.heads, n, hd))
        attn = T.matmul(T.mul(q, self.scale), T.transpose(k, (0, 1, 3, 2)))
        bias = T.index_select(self.bias_table, self._index)
        bias = T.transpose(T.reshape(bias, (n, n, self.heads)), (2, 0, 1))
        attn = T.add(attn, bias)
        if mask is not None:
            nw = mask.shape[0]
            attn = T.reshape(attn, (b_ // nw, nw, self.heads, n, n))
            attn = T.add(attn, T.Tensor(mask[:, None].astype(attn.dtype)))
            attn = T.reshape(attn, (b_, self.heads, n, n))
        attn = T.softmax(attn, axis=-1)
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.proj(T.reshape(out, (b_, n, c)))


class HAB(Module):
    """Hybrid attention block: window MSA plus a scaled parallel CAB."""

    def __init__(self, rng, dim, heads, window=8, shift=0, conv_scale=0.01,
                 compress_ratio=3, squeeze_factor=30, mlp_ratio=2.0,
                 qkv_bias=True):
        if not 0 <= shift < window:
            raise ValueError(f"shift {shift} outside [0, window {window})")
        self.window = window
        self.shift = shift
        self.conv_scale = conv_scale
        self.norm1 = LayerNorm(dim, axis=1)
        self.attn = WindowAttention(rng, dim, heads, window, qkv_bias)
        self.cab = CAB(rng, dim, compress_ratio, squeeze_factor)
        self.norm2 = LayerNorm(dim, axis=1)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))
        self._masks = {}

    def _mask(self, h, w):
        key = (h, w)
        if key not in self._masks:
            self._masks[key] = shift_attention_mask(h, w, self.window, self.shift)
        return self._masks[key]

    def forward(self, x):
        b, c, h, w = x.shape
        m = self.window
        if h % m or w % m:
            raise ShapeError(f"hab: {h}x{w} not divisible by window {m}")
        xn = self.norm1(x)
        conv_x = self.cab(xn)
        s = self.shift
        shifted = T.roll(xn, (-s, -s), (2, 3)) if s else xn
        wins = window_partition(shifted, m)
        mask = self._mask(h, w) if s else None
        wins = self.attn(wins, mask)
        attn_x = window_reverse(wins, m, b, h, w)
        if s:
            attn_x = T.roll(attn_x, (s, s), (2, 3))
        y = T.add(T.add(x, attn_x), T.mul(conv_x, self.conv_scale))
        return T.add(y, self.mlp(self.norm2(y)))


class OCAB(Module):
    """Overlapped cross-attention: queries from M x M windows, keys/values
    from concentric (1 + overlap_ratio) * M windows with stride M."""

    def __init__(self, rng, dim, heads, window=8, overlap_ratio=0.5,
                 mlp_ratio=2.0, qkv_bias=True):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        if not 0 <= overlap_ratio <= 1:
            raise ValueError(f"overlap_ratio {overlap_ratio} outside [0, 1]")
        ext = int(overlap_ratio * window)
        if ext % 2:
            raise ValueError(f"overlap_ratio {overlap_ratio} with window {window} "
                             f"gives odd extension {ext}; padding must be symmetric")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.overlap_win = window + ext
        self.scale = (dim // heads) ** -0.5
        self.norm1 = LayerNorm(dim, axis=1)
        self.qkv = Linear(rng, dim, dim * 3, bias=qkv_bias)
        self.proj = Linear(rng, dim, dim)
        self.bias_table = param(
            trunc_normal(rng, ((window + self.overlap_win - 1) ** 2, heads)))
        self._index = oca_position_index(window, self.overlap_win).reshape(-1)
        self.norm2 = LayerNorm(dim, axis=1)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))

    def forward(self, x):
        b, c, h, w = x.shape
        m = self.window
        mo = self.overlap_win
        if h % m or w % m:
            raise ShapeError(f"ocab: {h}x{w} not divisible by window {m}")
        xn = self.norm1(x)
        qkv = self.qkv(T.transpose(xn, (0, 2, 3, 1)))  # [B,H,W,3C]
        q = T.transpose(T.narrow(qkv, 3, 0, c), (0, 3, 1, 2))
        kv = T.transpose(T.narrow(qkv, 3, c, 2 * c), (0, 3, 1, 2))

        nq = m * m
        nk = mo * mo
        nw = (h // m) * (w // m)
        hd = c // self.heads
        q_wins = window_partition(q, m)  # [B*nW, M^2, C]
        q_wins = T.transpose(T.reshape(q_wins, (b * nw, nq, self.heads, hd)),
                             (0, 2, 1, 3))
        kv_wins = T.unfold(kv, kernel=mo, stride=m, padding=(mo - m) // 2)
        kv_wins = T.reshape(kv_wins, (b, 2, c, nk, nw))
        kv_wins = T.reshape(T.transpose(kv_wins, (1, 0, 4, 3, 2)),
                            (2, b * nw, nk, self.heads, hd))
        kv_wins = T.transpose(kv_wins, (0, 1, 3, 2, 4))  # [2, B*nW, heads, Mo^2, hd]
        k_wins = T.reshape(T.narrow(kv_wins, 0, 0, 1), (b * nw, self.heads, nk, hd))
        v_wins = T.reshape(T.narrow(kv_wins, 0, 1, 1), (b * nw, self.heads, nk, hd))

        attn = T.matmul(T.mul(q_wins, self.scale), T.transpose(k_wins, (0, 1, 3, 2)))
        bias = T.index_select(self.bias_table, self._index)
        bias = T.transpose(T.reshape(bias, (nq, nk, self.heads)), (2, 0, 1))
        attn = T.softmax(T.add(attn, bias), axis=-1)
        out = T.transpose(T.matmul(attn, v_wins), (0, 2, 1, 3))
        out = self.proj(T.reshape(out, (b * nw, nq, c)))
        y = T.add(x, window_reverse(out, m, b, h, w))
        return T.add(y, self.mlp(self.norm2(y)))


class RHAG(Module):
    """Residual hybrid attention group: HABs with alternating shift, an OCAB,
    and a trailing 3x3 conv, all behind one outer residual."""

    def __init__(self, rng, dim, heads, depth, window=8, overlap_ratio=0.5,
                 conv_scale=0.01, mlp_ratio=2.0):
        if window < 2:
            raise ValueError(f"window must be >= 2, got {window}")
        if not 0 <= overlap_ratio < 1:
            raise ValueError(f"overlap_ratio {overlap_ratio} outside [0, 1)")
        self.window = window
        self.blocks = ModuleList([
            HAB(rng, dim, heads, window=window,
                shift=0 if i % 2 == 0 else window // 2,
                conv_scale=conv_scale, mlp_ratio=mlp_ratio)
            for i in range(depth)
        ])
        self.ocab = OCAB(rng, dim, heads, window=window,
                         overlap_ratio=overlap_ratio, mlp_ratio=mlp_ratio)
        self.conv = Conv2d(rng, dim, dim, 3, padding=1)

    def forward(self, x):
        h, w = x.shape[2:]
        m = self.window
        ph, pw = (-h) % m, (-w) % m
        y = T.pad_reflect(x, {2: (0, ph), 3: (0, pw)}) if ph or pw else x
        for i, blk in enumerate(self.blocks):
            with T.scope(f"hab{i}"):
                y = blk(y)
        with T.scope("ocab"):
            y = self.ocab(y)
        y = self.conv(y)
        if ph or pw:
            y = T.crop(y, {2: (0, h), 3: (0, w)})
        return T.add(x, y)
