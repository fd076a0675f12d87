"""Prompt-guided U-shape restoration network.

Four-level encoder/decoder over channel widths C, 2C, 4C, 8C. The two
outer levels use hybrid-attention groups (window attention + channel
attention + overlapping cross attention); the two inner levels use
channel-attention transformer blocks. Each decoder level starts with a
prompt block that injects degradation context into the skip-fused feature.
The network predicts a residual added to its input.

Checkpoints are a single binary file: magic, version, a JSON manifest
(config, stage metadata, per-parameter name/dtype/shape/offset), then raw
little-endian float32 payloads at 64-byte aligned offsets.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from math import lcm

import numpy as np

from . import tensor as T
from .blocks import TransformerBlock
from .hat import RHAG
from .nn import Conv2d, Module, ModuleList
from .prompt import PromptBlock

MAGIC = b"PCIR"
FORMAT_VERSION = 1
_ALIGN = 64


class CheckpointError(ValueError):
    """Unreadable, truncated, or mismatched checkpoint file."""


@dataclass
class NetworkConfig:
    """Architecture hyperparameters; everything needed to rebuild a model."""

    base_channels: int = 48
    depths: tuple = (4, 6, 6, 8)
    heads: tuple = (1, 2, 4, 8)
    window: int = 8
    prompt_bases: int = 5
    refinement_depth: int = 4
    expansion: float = 2.66
    overlap_ratio: float = 0.5
    conv_scale: float = 0.01
    mlp_ratio: float = 2.0
    use_rhag: bool = True
    use_dpm: bool = True

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ValueError("depths and heads must list all 4 levels")
        if min(self.depths) < 1 or min(self.heads) < 1:
            raise ValueError("depths and heads must be positive")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError(f"base_channels must be even and >= 2, "
                             f"got {self.base_channels}")
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if self.prompt_bases < 1:
            raise ValueError("prompt_bases must be >= 1")
        if self.refinement_depth < 0:
            raise ValueError("refinement_depth must be >= 0")
        if self.expansion <= 0 or self.mlp_ratio <= 0:
            raise ValueError("expansion and mlp_ratio must be positive")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ValueError(f"overlap_ratio must be in [0, 1), "
                             f"got {self.overlap_ratio}")
        for lvl, (mult, h) in enumerate(zip((1, 2, 4, 8), self.heads)):
            if (self.base_channels * mult) % h:
                raise ValueError(f"level {lvl} channels "
                                 f"{self.base_channels * mult} not divisible "
                                 f"by heads {h}")

    @property
    def pad_multiple(self):
        return lcm(8, self.window)


def reference_config(**overrides):
    """Full-size configuration used for the published-quality model."""
    return NetworkConfig(**overrides)


def toy_config(**overrides):
    """Small configuration that trains in minutes on a CPU."""
    kw = dict(base_channels=16, depths=(2, 2, 2, 2), prompt_bases=3)
    kw.update(overrides)
    return NetworkConfig(**kw)


def micro_config(**overrides):
    """Tiny configuration for end-to-end finite-difference checks."""
    kw = dict(base_channels=4, depths=(1, 1, 1, 1), prompt_bases=2,
              refinement_depth=1)
    kw.update(overrides)
    return NetworkConfig(**kw)


class TransformerStack(Module):
    """Plain sequence of channel-attention transformer blocks."""

    def __init__(self, rng, dim, heads, depth, expansion):
        self.blocks = ModuleList(
            TransformerBlock(rng, dim, heads, expansion) for _ in range(depth))

    def forward(self, x):
        for i, block in enumerate(self.blocks):
            with T.scope(f"block{i}"):
                x = block(x)
        return x


class Downsample(Module):
    """Halve resolution, double channels (conv then pixel unshuffle)."""

    def __init__(self, rng, dim):
        self.conv = Conv2d(rng, dim, dim // 2, 3, padding=1, bias=False)

    def forward(self, x):
        return T.pixel_unshuffle(self.conv(x), 2)


class Upsample(Module):
    """Double resolution, halve channels (conv then pixel shuffle)."""

    def __init__(self, rng, dim):
        self.conv = Conv2d(rng, dim, dim * 2, 3, padding=1, bias=False)

    def forward(self, x):
        return T.pixel_shuffle(self.conv(x), 2)


def _stage(rng, dim, heads, depth, cfg, hybrid):
    if hybrid and cfg.use_rhag:
        return RHAG(rng, dim, heads, depth, window=cfg.window,
                    overlap_ratio=cfg.overlap_ratio,
                    conv_scale=cfg.conv_scale, mlp_ratio=cfg.mlp_ratio)
    return TransformerStack(rng, dim, heads, depth, cfg.expansion)


class RestorationNet(Module):
    """Blind compressed-image restoration model. Input/output in [0, 1]."""

    def __init__(self, rng, config: NetworkConfig):
        cfg = config
        c = cfg.base_channels
        dims = (c, 2 * c, 4 * c, 8 * c)
        self.config = cfg

        self.embed = Conv2d(rng, 3, c, 3, padding=1, bias=False)

        self.encoder1 = _stage(rng, dims[0], cfg.heads[0], cfg.depths[0], cfg, True)
        self.down1 = Downsample(rng, dims[0])
        self.encoder2 = _stage(rng, dims[1], cfg.heads[1], cfg.depths[1], cfg, True)
        self.down2 = Downsample(rng, dims[1])
        self.encoder3 = _stage(rng, dims[2], cfg.heads[2], cfg.depths[2], cfg, False)
        self.down3 = Downsample(rng, dims[2])
        self.latent = _stage(rng, dims[3], cfg.heads[3], cfg.depths[3], cfg, False)

        self.up3 = Upsample(rng, dims[3])
        self.reduce3 = Conv2d(rng, 2 * dims[2], dims[2], 1, bias=False)
        self.prompt3 = PromptBlock(rng, dims[2], cfg.heads[2], cfg.prompt_bases,
                                   dynamic=cfg.use_dpm, expansion=cfg.expansion)
        self.decoder3 = _stage(rng, dims[2], cfg.heads[2], cfg.depths[2], cfg, False)

        self.up2 = Upsample(rng, dims[2])
        self.reduce2 = Conv2d(rng, 2 * dims[1], dims[1], 1, bias=False)
        self.prompt2 = PromptBlock(rng, dims[1], cfg.heads[1], cfg.prompt_bases,
                                   dynamic=cfg.use_dpm, expansion=cfg.expansion)
        self.decoder2 = _stage(rng, dims[1], cfg.heads[1], cfg.depths[1], cfg, True)

        self.up1 = Upsample(rng, dims[1])
        self.reduce1 = Conv2d(rng, 2 * dims[0], dims[0], 1, bias=False)
        self.prompt1 = PromptBlock(rng, dims[0], cfg.heads[0], cfg.prompt_bases,
                                   dynamic=cfg.use_dpm, expansion=cfg.expansion)
        self.decoder1 = _stage(rng, dims[0], cfg.heads[0], cfg.depths[0], cfg, True)

        self.refinement = TransformerStack(rng, dims[0], cfg.heads[0],
                                           cfg.refinement_depth, cfg.expansion)
        self.head = Conv2d(rng, dims[0], 3, 3, padding=1, bias=True)

    def forward(self, x, training=False, return_residual=False):
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise T.ShapeError(f"expected [B,3,H,W] input, got {x.shape}")
        _, _, h, w = x.shape
        if h < 16 or w < 16:
            raise T.ShapeError(f"input must be at least 16x16, got {h}x{w}")

        mult = self.config.pad_multiple
        ph, pw = -h % mult, -w % mult
        xp = T.pad_reflect(x, {2: (0, ph), 3: (0, pw)}) if ph or pw else x

        with T.scope("embed"):
            f0 = self.embed(xp)
        with T.scope("encoder1"):
            e1 = self.encoder1(f0)
        with T.scope("encoder2"):
            e2 = self.encoder2(self.down1(e1))
        with T.scope("encoder3"):
            e3 = self.encoder3(self.down2(e2))
        with T.scope("latent"):
            z = self.latent(self.down3(e3))

        with T.scope("decoder3"):
            d3 = self.reduce3(T.concat([self.up3(z), e3], axis=1))
            d3 = self.decoder3(self.prompt3(d3))
        with T.scope("decoder2"):
            d2 = self.reduce2(T.concat([self.up2(d3), e2], axis=1))
            d2 = self.decoder2(self.prompt2(d2))
        with T.scope("decoder1"):
            d1 = self.reduce1(T.concat([self.up1(d2), e1], axis=1))
            d1 = self.decoder1(self.prompt1(d1))

        with T.scope("refinement"):
            r = self.refinement(d1)
        with T.scope("head"):
            res = self.head(r)
        if ph or pw:
            res = T.crop(res, {2: (0, h), 3: (0, w)})

        out = res + x
        if not training:
            out = T.Tensor(np.clip(out.data, 0.0, 1.0))
        if return_residual:
            return out, res
        return out


def build(config: NetworkConfig, seed=0):
    """Deterministically construct a model from a config and seed."""
    return RestorationNet(np.random.default_rng(seed), config)


def count_params(model: Module):
    return model.num_params()


def _pad_to(n, align):
    return -n % align


def save_checkpoint(path, model: RestorationNet, stage=None):
    """Serialize model weights plus config and optional stage metadata."""
    params = list(model.named_parameters())
    entries = []
    offset = 0
    for name, p in params:
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "dtype": "float32",
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": arr.nbytes})
        offset += arr.nbytes + _pad_to(arr.nbytes, _ALIGN)
    manifest = {"config": dataclasses.asdict(model.config),
                "stage": stage, "params": entries}
    blob = json.dumps(manifest).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(b"\x00" * _pad_to(f.tell(), _ALIGN))
        for _, p in params:
            raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
            f.write(raw)
            f.write(b"\x00" * _pad_to(len(raw), _ALIGN))


def load_checkpoint(path):
    """Rebuild the model stored at path. Returns (model, stage_metadata)."""
    with open(path, "rb") as f:
        head = f.read(4)
        if head != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file "
                                  f"(bad magic {head!r})")
        version, = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version "
                                  f"{version}")
        blob_len, = struct.unpack("<Q", f.read(8))
        blob = f.read(blob_len)
        if len(blob) != blob_len:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except ValueError as exc:
            raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
        f.read(_pad_to(f.tell(), _ALIGN))
        payload_start = f.tell()

        state = {}
        for entry in manifest["params"]:
            if entry["dtype"] != "float32":
                raise CheckpointError(f"{path}: unsupported dtype "
                                      f"{entry['dtype']} for {entry['name']}")
            f.seek(payload_start + entry["offset"])
            raw = f.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise CheckpointError(f"{path}: truncated payload for "
                                      f"{entry['name']}")
            state[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(
                entry["shape"]).astype(np.float32)

    try:
        config = NetworkConfig(**manifest["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config in manifest: {exc}") from exc
    model = build(config)
    model.load_state_dict(state)
    return model, manifest.get("stage")
