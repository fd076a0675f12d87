"""Channel-attention transformer block: transposed attention plus gated FFN.

Attention here is channel-to-channel ("transposed"): q, k, v are produced by
a 1x1 conv followed by a 3x3 depthwise conv, reshaped to [B, heads, C/heads,
H*W], and the (C/heads)^2 attention matrix is built from spatially L2
normalized q and k with a learnable per-head temperature. Cost is linear in
the pixel count, so the block runs at any resolution. The feed-forward half
expands channels, gates one half with GELU of the other, and projects back.
Both sub-blocks sit behind pre-norm residuals with bias-free channel
LayerNorm.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Module, param


class MDTA(Module):
    """Multi-head transposed (channel) attention."""

    def __init__(self, rng, dim, heads, bias=False):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.temperature = param(np.ones((heads, 1, 1)))
        self.qkv = Conv2d(rng, dim, dim * 3, 1, bias=bias)
        self.qkv_dw = Conv2d(rng, dim * 3, dim * 3, 3, padding=1,
                             groups=dim * 3, bias=bias)
        self.project_out = Conv2d(rng, dim, dim, 1, bias=bias)

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv_dw(self.qkv(x))
        q, k, v = T.chunk(qkv, 3, axis=1)
        hd = c // self.heads

        def heads_view(t):
            return T.reshape(t, (b, self.heads, hd, h * w))

        q = T.l2_normalize(heads_view(q), axis=-1)
        k = T.l2_normalize(heads_view(k), axis=-1)
        v = heads_view(v)
        attn = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        attn = T.softmax(T.mul(attn, self.temperature), axis=-1)
        out = T.reshape(T.matmul(attn, v), (b, c, h, w))
        return self.project_out(out)


class GDFN(Module):
    """Gated depthwise-conv feed-forward network."""

    def __init__(self, rng, dim, expansion=2.66, bias=False):
        if expansion <= 0:
            raise ValueError(f"expansion must be positive, got {expansion}")
        hidden = int(dim * expansion)
        self.project_in = Conv2d(rng, dim, hidden * 2, 1, bias=bias)
        self.dwconv = Conv2d(rng, hidden * 2, hidden * 2, 3, padding=1,
                             groups=hidden * 2, bias=bias)
        self.project_out = Conv2d(rng, hidden, dim, 1, bias=bias)

    def forward(self, x):
        x1, x2 = T.chunk(self.dwconv(self.project_in(x)), 2, axis=1)
        return self.project_out(T.mul(T.gelu(x1), x2))


class TransformerBlock(Module):
    """Pre-norm residual pair: x + MDTA(LN(x)), then + GDFN(LN(.))."""

    def __init__(self, rng, dim, heads, expansion=2.66, bias=False):
        self.norm1 = LayerNorm(dim, axis=1, bias=False)
        self.attn = MDTA(rng, dim, heads, bias=bias)
        self.norm2 = LayerNorm(dim, axis=1, bias=False)
        self.ffn = GDFN(rng, dim, expansion, bias=bias)

    def forward(self, x):
        with T.scope("mdta"):
            x = T.add(x, self.attn(self.norm1(x)))
        with T.scope("gdfn"):
            return T.add(x, self.ffn(self.norm2(x)))
