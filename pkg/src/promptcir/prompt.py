"""Prompt generation and interaction for decoder guidance.

The dynamic path predicts per-pixel mixing weights over N learned basis
vectors with a pointwise map + softmax, composes a prompt feature at the
input's own resolution (the bases are 1x1, so any H,W works), and fuses it
with a 3x3 conv. The interaction block concatenates prompt and feature and
lets one channel-attention transformer block mix them before a 1x1 reduction
back to the feature width.

The static variant (ablation fallback) keeps a fixed-size learned prompt
stack weighted by one global softmax vector from pooled features, resized
bilinearly to the target resolution.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .blocks import TransformerBlock
from .nn import Conv2d, Linear, Module, param


class PromptBank(Module):
    """N learnable 1x1 prompt bases plus the weight generator and fuse conv."""

    def __init__(self, rng, in_channels, n_bases, prompt_dim):
        if n_bases < 1 or prompt_dim < 1:
            raise ValueError(f"need n_bases >= 1 and prompt_dim >= 1, "
                             f"got {n_bases}, {prompt_dim}")
        bound = math.sqrt(3.0 / prompt_dim)  # fan-in uniform, zero mean
        self.bases = param(rng.uniform(-bound, bound, size=(n_bases, prompt_dim)))
        self.weight_generator = Conv2d(rng, in_channels, n_bases, 1)
        self.fuse_conv = Conv2d(rng, prompt_dim, prompt_dim, 3, padding=1, bias=False)

    @property
    def n_bases(self):
        return self.bases.shape[0]

    @property
    def prompt_dim(self):
        return self.bases.shape[1]

    def weights(self, feat):
        """Per-pixel softmax mixing weights, [B,N,H,W]."""
        return T.softmax(self.weight_generator(feat), axis=1)

    def forward(self, feat):
        return dpm(feat, self)


def dpm(feat, bank: PromptBank):
    """Dynamic prompt: softmax-weighted basis mixture, fused by a 3x3 conv."""
    b, _, h, w = feat.shape
    w_px = bank.weights(feat)  # [B,N,H,W]
    flat = T.transpose(T.reshape(w_px, (b, bank.n_bases, h * w)), (0, 2, 1))
    mixed = T.matmul(flat, bank.bases)  # [B,HW,prompt_dim]
    pre = T.reshape(T.transpose(mixed, (0, 2, 1)), (b, bank.prompt_dim, h, w))
    return bank.fuse_conv(pre)


class PromptInteraction(Module):
    """Concat [feature; prompt], one transformer block, 1x1 reduce back."""

    def __init__(self, rng, channels, prompt_dim, heads, expansion=2.66):
        joint = channels + prompt_dim
        if joint % heads:
            raise ValueError(f"channels+prompt_dim {joint} not divisible by heads {heads}")
        self.block = TransformerBlock(rng, joint, heads, expansion)
        self.reduce = Conv2d(rng, joint, channels, 1, bias=False)

    def forward(self, feat, prompt):
        if feat.shape[2:] != prompt.shape[2:]:
            raise T.ShapeError(f"pim: feature {feat.shape[2:]} vs prompt "
                               f"{prompt.shape[2:]} spatial mismatch")
        return self.reduce(self.block(T.concat([feat, prompt], axis=1)))


def pim(feat, prompt, interaction: PromptInteraction):
    return interaction(feat, prompt)


class StaticPrompt(Module):
    """Fixed-size learned prompts with one global weight vector per image."""

    def __init__(self, rng, in_channels, n_bases, prompt_dim, size=16):
        if n_bases < 1 or prompt_dim < 1 or size < 1:
            raise ValueError("n_bases, prompt_dim, and size must be >= 1")
        bound = math.sqrt(3.0 / (prompt_dim * size * size))
        self.prompts = param(
            rng.uniform(-bound, bound, size=(n_bases, prompt_dim, size, size)))
        self.weight_generator = Linear(rng, in_channels, n_bases)
        self.fuse_conv = Conv2d(rng, prompt_dim, prompt_dim, 3, padding=1, bias=False)

    def forward(self, feat):
        b, _, h, w = feat.shape
        n, pd, s, _ = self.prompts.shape
        pooled = T.mean_(feat, axis=(2, 3))  # GAP, [B,C]
        w_g = T.softmax(self.weight_generator(pooled), axis=-1)  # [B,N]
        flat = T.reshape(self.prompts, (n, pd * s * s))
        mixed = T.reshape(T.matmul(w_g, flat), (b, pd, s, s))
        resized = T.interpolate_bilinear(mixed, h, w)
        return self.fuse_conv(resized)


class PromptBlock(Module):
    """Prompt generation (dynamic or static) followed by interaction."""

    def __init__(self, rng, channels, heads, n_bases, dynamic=True,
                 prompt_dim=None, expansion=2.66):
        prompt_dim = channels if prompt_dim is None else prompt_dim
        if dynamic:
            self.gen = PromptBank(rng, channels, n_bases, prompt_dim)
        else:
            self.gen = StaticPrompt(rng, channels, n_bases, prompt_dim)
        self.interaction = PromptInteraction(rng, channels, prompt_dim, heads,
                                             expansion)

    def forward(self, feat):
        with T.scope("prompt"):
            return self.interaction(feat, self.gen(feat))
