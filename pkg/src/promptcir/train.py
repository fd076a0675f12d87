"""Two-stage training: config, AdamW, cosine schedule, and the loop.

Stage 1 pre-trains on the seven fixed quality levels; stage 2 fine-tunes on
online-compressed crops with quality drawn uniformly from [10, 70] and must
start from a stage-1 checkpoint. The loss is mean absolute error on [0, 1]
RGB. All randomness flows from the config seed, so a run is reproducible
byte-for-byte in deterministic mode.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetManifest, PatchSampler
from .jpeg import SUBSAMPLINGS
from .network import NetworkConfig, build, load_checkpoint, save_checkpoint, toy_config


class TrainingDiverged(RuntimeError):
    """Loss or an intermediate value went non-finite."""


@dataclass
class TrainConfig:
    stage: int = 2
    crop: int = 128
    batch_size: int = 24
    lr_init: float = 2e-4
    lr_floor: float = 1e-6
    iterations: int = 800_000
    seed: int = 0
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    eps: float = 1e-8
    subsampling: str = "420"
    fixed_qf: int = None  # pin every sample to one quality (overfit probes)
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 100

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.crop < 16:
            raise ValueError(f"crop must be >= 16, got {self.crop}")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if not 0.0 <= self.lr_floor <= self.lr_init:
            raise ValueError(f"need 0 <= lr_floor <= lr_init, got "
                             f"{self.lr_floor} vs {self.lr_init}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), "
                             f"got {self.betas}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.subsampling not in SUBSAMPLINGS:
            raise ValueError(f"subsampling must be one of {SUBSAMPLINGS}")
        if self.fixed_qf is not None and not 1 <= self.fixed_qf <= 100:
            raise ValueError(f"fixed_qf must be in [1, 100], got {self.fixed_qf}")


def paper_stage1():
    """Published-scale stage-1 recipe (8-GPU scale; not a desk target)."""
    return TrainConfig(stage=1, lr_init=2e-4, iterations=800_000,
                       batch_size=24, crop=128)


def paper_stage2():
    return TrainConfig(stage=2, lr_init=1e-4, iterations=600_000,
                       batch_size=24, crop=128)


def desk_stage1(**overrides):
    kw = dict(stage=1, lr_init=2e-4, iterations=2000, batch_size=2, crop=64,
              log_every=50)
    kw.update(overrides)
    return TrainConfig(**kw)


def desk_stage2(**overrides):
    kw = dict(stage=2, lr_init=1e-4, iterations=1000, batch_size=2, crop=64,
              log_every=50)
    kw.update(overrides)
    return TrainConfig(**kw)


def cosine_lr(step, total, lr_init, lr_floor):
    """Cosine anneal from lr_init at step 0 toward lr_floor at step total."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_floor + (lr_init - lr_floor) * (1 + math.cos(math.pi * step / total)) / 2


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * update


def l1_loss(pred, target):
    return T.mean_(T.abs_(pred - target))


def train(config: TrainConfig, manifest: DatasetManifest, net_config=None,
          out_dir=None, init_checkpoint=None, resume=None, log=None):
    """Run the training loop. Returns (model, history).

    Stage 1 builds a fresh model (net_config, default toy). Stage 2 must be
    given a stage-1 checkpoint to fine-tune. resume continues an interrupted
    same-stage run from its recorded step with fresh optimizer moments.
    """
    start = 0
    if resume is not None:
        model, meta = load_checkpoint(resume)
        if not meta or meta.get("stage") != config.stage:
            raise ValueError(f"resume checkpoint stage {meta and meta.get('stage')} "
                             f"does not match configured stage {config.stage}")
        start = int(meta.get("step", 0))
        if start >= config.iterations:
            raise ValueError(f"resume checkpoint already at step {start} of "
                             f"{config.iterations}")
    elif config.stage == 2:
        if init_checkpoint is None:
            raise ValueError("stage 2 training requires a stage-1 checkpoint "
                             "(pass init_checkpoint)")
        model, meta = load_checkpoint(init_checkpoint)
        if not meta or meta.get("stage") != 1:
            raise ValueError(f"init checkpoint is not a stage-1 result "
                             f"(stage metadata: {meta and meta.get('stage')})")
    else:
        model = build(net_config if net_config is not None else toy_config(),
                      seed=config.seed)
        if init_checkpoint is not None:
            model, _ = load_checkpoint(init_checkpoint)

    rng = np.random.default_rng(config.seed)
    sampler = PatchSampler(manifest, config.crop, rng, stage=config.stage,
                           subsampling=config.subsampling, hflip=config.hflip,
                           vflip=config.vflip, rot90=config.rot90,
                           fixed_qf=config.fixed_qf)
    opt = AdamW(model.parameters(), lr=config.lr_init, betas=config.betas,
                eps=config.eps, weight_decay=config.weight_decay)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    for step in range(start, config.iterations):
        opt.lr = cosine_lr(step, config.iterations, config.lr_init,
                           config.lr_floor)
        deg, cln, _ = sampler.batch(config.batch_size)
        x, y = T.Tensor(deg), T.Tensor(cln)
        opt.zero_grad()
        try:
            with T.Tape() as tape:
                loss = l1_loss(model(x, training=True), y)
                tape.backward(loss)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.step()
        history.append({"step": step, "loss": value, "lr": opt.lr})
        if log is not None and (step % config.log_every == 0
                                or step + 1 == config.iterations):
            log(f"step {step:>7d}  loss {value:.5f}  lr {opt.lr:.3e}")
        if (out_dir is not None and config.checkpoint_every
                and (step + 1) % config.checkpoint_every == 0
                and step + 1 < config.iterations):
            save_checkpoint(out_dir / f"model_step{step + 1:07d}.pcir", model,
                            stage=_stage_meta(config, step + 1))

    if out_dir is not None:
        save_checkpoint(out_dir / "model_final.pcir", model,
                        stage=_stage_meta(config, config.iterations))
    return model, history


def _stage_meta(config, step):
    return {"stage": config.stage, "step": step,
            "train_config": dataclasses.asdict(config)}
