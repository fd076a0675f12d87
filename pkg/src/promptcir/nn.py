"""Parameter containers and the small set of layers the networks are built from.

Modules hold named parameters (and child modules) in attribute insertion
order, which fixes the parameter iteration order used by optimizers and
checkpoints. Initialization draws from an explicit numpy Generator so model
construction is reproducible from a seed.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameter registration, iteration, dtype casting."""

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for name, val in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(val, Tensor):
                out.append((full, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(full))
        return out

    def num_params(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def cast_(self, dtype):
        """In-place dtype change of every parameter (float64 for grad checks)."""
        for _, p in self.named_parameters():
            p.data = np.ascontiguousarray(p.data.astype(dtype))
        return self

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"parameter name mismatch: missing={missing[:8]} "
                           f"unexpected={unexpected[:8]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(f"shape mismatch for '{name}': checkpoint "
                                 f"{tuple(arr.shape)} vs model {tuple(p.data.shape)}")
            p.data = np.ascontiguousarray(arr.astype(p.data.dtype))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Sequence of child modules registered under their list index."""

    def __init__(self, mods=()):
        self._mods = list(mods)

    def append(self, mod):
        self._mods.append(mod)

    def __iter__(self):
        return iter(self._mods)

    def __len__(self):
        return len(self._mods)

    def __getitem__(self, i):
        return self._mods[i]

    def named_parameters(self, prefix=""):
        out = []
        for i, m in enumerate(self._mods):
            full = f"{prefix}.{i}" if prefix else str(i)
            out.extend(m.named_parameters(full))
        return out


def param(arr, requires_grad=True):
    return Tensor(np.ascontiguousarray(arr, dtype=T.DEFAULT_DTYPE), requires_grad=requires_grad)


def kaiming_uniform(rng, shape, fan_in, a=math.sqrt(5.0)):
    """He-uniform with leaky-relu gain, the default conv/linear weight init."""
    gain = math.sqrt(2.0 / (1.0 + a * a))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """N(0, std) resampled into [-bound*std, bound*std]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0,
                 groups=1, bias=True):
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = param(kaiming_uniform(
            rng, (out_ch, in_ch // groups, kernel, kernel), fan_in))
        if bias:
            bound = 1.0 / math.sqrt(fan_in)
            self.bias = param(rng.uniform(-bound, bound, size=out_ch))
        else:
            self.bias = None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding, groups=self.groups)


class Linear(Module):
    def __init__(self, rng, in_f, out_f, bias=True):
        self.weight = param(kaiming_uniform(rng, (out_f, in_f), in_f))
        if bias:
            bound = 1.0 / math.sqrt(in_f)
            self.bias = param(rng.uniform(-bound, bound, size=out_f))
        else:
            self.bias = None

    def forward(self, x):
        wt = T.transpose(self.weight, (1, 0))
        out = T.matmul(x, wt)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    """Mean-subtracted, unit-variance normalization over one axis.

    ``bias=False`` keeps the scale gamma but drops beta; the channel
    normalization inside the restoration blocks uses that form.
    """

    def __init__(self, dim, axis=-1, bias=True, eps=1e-6):
        self.axis = axis
        self.eps = eps
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim)) if bias else None

    def forward(self, x):
        return T.layer_norm(x, self.axis, self.gamma, self.beta, eps=self.eps)
