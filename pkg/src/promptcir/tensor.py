"""Minimal dense tensor library with tape-based reverse-mode differentiation.

Everything is a contiguous row-major numpy array wrapped in a :class:`Tensor`.
Layout convention for images/features is NCHW. Compute dtype is float32 by
default; float64 is used for gradient checking. Every forward op verifies its
output is finite and otherwise raises :class:`NonFiniteError` naming the op
and the active scope, so training bugs surface at the layer that caused them.

Reductions always run in numpy's fixed (pairwise) summation order, so repeated
runs on the same machine are bit-identical; ``PCIR_DETERMINISTIC=0`` merely
releases that guarantee for future parallel implementations, it does not
change current behavior.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


def deterministic() -> bool:
    """Whether fixed-order (bit-reproducible) reductions are required."""
    return os.environ.get("PCIR_DETERMINISTIC", "1") != "0"


# --------------------------------------------------------------------------
# scopes: layer names for diagnostics
# --------------------------------------------------------------------------

_SCOPE: list = []


@contextmanager
def scope(name):
    """Label ops run inside this context; used in NonFiniteError messages."""
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def _check_finite(op, arr):
    if arr.size == 0:
        raise ShapeError(f"{op}: empty output")
    lo, hi = arr.min(), arr.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        where = "/".join(_SCOPE) if _SCOPE else "<top>"
        raise NonFiniteError(f"non-finite values produced by op '{op}' in scope '{where}'")


# --------------------------------------------------------------------------
# Tensor and Tape
# --------------------------------------------------------------------------

class Tensor:
    """Dense N-d float array, optionally participating in the gradient tape.

    Treat tensors as immutable values: ops return new tensors and never write
    into their inputs. Parameter updates (optimizers) may mutate ``.data`` in
    place, but only between forward/backward passes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        """A defensive copy of the underlying array."""
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Same storage, detached from any graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        return t

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


class Tape:
    """Ordered record of executed differentiable ops.

    One forward/backward pass at a time; backward replays the record in exact
    reverse execution order. Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
            tape.backward(loss)

    Repeated ``backward`` calls without resetting grads accumulate into the
    leaves (documented behavior, used for gradient accumulation).
    """

    def __init__(self):
        self._nodes = []        # (op_name, inputs, out_id, backward_fn)
        self._produced = set()  # ids of tensors created by ops on this tape

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def _append(self, op, inputs, out, bwd):
        self._produced.add(id(out))
        self._nodes.append((op, inputs, id(out), bwd))

    def backward(self, loss):
        """Populate ``.grad`` on every reachable requires_grad leaf."""
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ShapeError("backward() needs a scalar loss tensor")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced under this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for op, inputs, out_id, bwd in reversed(self._nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            in_grads = bwd(g)
            for t, ig in zip(inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                if id(t) in self._produced:
                    acc = grads.get(id(t))
                    grads[id(t)] = ig if acc is None else acc + ig
                else:  # leaf
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += ig


_TAPES: list = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def backward(loss):
    """Backward through the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise ValueError("backward() requires an active Tape")
    tape.backward(loss)


def _make(op, out_data, inputs, bwd):
    """Wrap an op result, check finiteness, and record it on the active tape."""
    _check_finite(op, out_data)
    tape = _active_tape()
    need = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = need
    out.grad = None
    if need:
        tape._append(op, inputs, out, bwd)
    return out


def _binary_dtypes(op, a, b):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast to reach g's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g)


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype) if not isinstance(b, Tensor) else b
    _binary_dtypes("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", out, (a, b), bwd)


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype) if not isinstance(b, Tensor) else b
    _binary_dtypes("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", out, (a, b), bwd)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype) if not isinstance(b, Tensor) else b
    _binary_dtypes("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", out, (a, b), bwd)


def div(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype) if not isinstance(b, Tensor) else b
    _binary_dtypes("div", a, b)
    out = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make("div", out, (a, b), bwd)


def neg(a):
    out = -a.data
    return _make("neg", out, (a,), lambda g: (-g,))


def abs_(a):
    out = np.abs(a.data)
    sign = np.sign(a.data)
    return _make("abs", out, (a,), lambda g: (g * sign,))


def square(a):
    out = a.data * a.data
    return _make("square", out, (a,), lambda g: (2.0 * g * a.data,))


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def gelu(a):
    """Exact (erf-form) GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make("gelu", out, (a,), bwd)


def relu(a):
    out = np.maximum(a.data, 0)
    mask = a.data > 0
    return _make("relu", out, (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis):
    """Shift-stabilized softmax along one axis; rows sum to 1."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), bwd)


def l2_normalize(a, axis, eps=1e-12):
    """x / max(||x||_2, eps) along ``axis`` (clamped like torch F.normalize)."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    n = np.maximum(norm, eps)
    out = x / n

    def bwd(g):
        free = norm > eps  # gradient flows through the norm only when unclamped
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - np.where(free, dot * out, 0.0)) / n,)

    return _make("l2_normalize", out, (a,), bwd)


# --------------------------------------------------------------------------
# reductions and normalization
# --------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=True),)

    return _make("sum", out, (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else out.size and a.data.size // max(out.size, 1)
    if axis is not None:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= a.data.shape[i]

    def bwd(g):
        if axis is None:
            gg = np.broadcast_to(g, a.data.shape)
        else:
            gg = np.broadcast_to(g if keepdims else np.expand_dims(g, axis), a.data.shape)
        return ((gg / count).astype(a.data.dtype, copy=False),)

    return _make("mean", out, (a,), bwd)


def layer_norm(a, axis, gamma=None, beta=None, eps=1e-6):
    """Zero-mean unit-variance along ``axis``, then optional affine.

    gamma/beta are 1-D of length ``shape[axis]``; pass None to skip. The
    bias-free variant used by the attention blocks passes beta=None.
    """
    if eps <= 0:
        raise ShapeError("layer_norm: eps must be > 0")
    x = a.data
    ax = axis if axis >= 0 else x.ndim + axis
    mu = x.mean(axis=ax, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv

    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    inputs = [a]
    out = xhat
    if gamma is not None:
        inputs.append(gamma)
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        inputs.append(beta)
        out = out + beta.data.reshape(bshape)
    out = out.astype(x.dtype, copy=False)
    n = x.shape[ax]

    def bwd(g):
        gxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        m1 = gxhat.mean(axis=ax, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=ax, keepdims=True)
        dx = inv * (gxhat - m1 - xhat * m2)
        grads = [dx.astype(x.dtype, copy=False)]
        red = tuple(i for i in range(x.ndim) if i != ax)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red).reshape(gamma.data.shape))
        if beta is not None:
            grads.append(g.sum(axis=red).reshape(beta.data.shape))
        return tuple(grads)

    return _make("layer_norm", out, tuple(inputs), bwd)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(a, shape):
    out = a.data.reshape(shape)
    return _make("reshape", np.ascontiguousarray(out), (a,),
                 lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make("transpose", out, (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    dt = tensors[0].data.dtype
    for t in tensors:
        if t.data.dtype != dt:
            raise ShapeError("concat: mixed dtypes")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(tensors), bwd)


def narrow(a, axis, start, length):
    """Slice ``length`` elements from ``start`` along ``axis``."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range "
                         f"for axis {axis} of extent {a.data.shape[axis]}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _make("narrow", out, (a,), bwd)


def chunk(a, n, axis):
    """Split into n equal parts along axis (extent must divide)."""
    ext = a.data.shape[axis]
    if ext % n:
        raise ShapeError(f"chunk: axis extent {ext} not divisible by {n}")
    step = ext // n
    return tuple(narrow(a, axis, i * step, step) for i in range(n))


def roll(a, shifts, axes):
    out = np.roll(a.data, shifts, axis=axes)
    inv = tuple(-s for s in shifts) if isinstance(shifts, tuple) else -shifts
    return _make("roll", out, (a,), lambda g: (np.roll(g, inv, axis=axes),))


def _pad_width(ndim, pads):
    # pads: dict axis -> (before, after)
    return [(pads.get(i, (0, 0))) for i in range(ndim)]


def pad_zero(a, pads):
    """Zero-pad; ``pads`` maps axis -> (before, after)."""
    width = _pad_width(a.data.ndim, pads)
    out = np.pad(a.data, width, mode="constant")
    sl = tuple(slice(b, b + s) for (b, _), s in zip(width, a.data.shape))
    return _make("pad_zero", out, (a,), lambda g: (np.ascontiguousarray(g[sl]),))


def pad_reflect(a, pads):
    """Reflect-pad (edge not repeated); pad must be < axis extent."""
    width = _pad_width(a.data.ndim, pads)
    for (b, e), s in zip(width, a.data.shape):
        if b >= s or e >= s:
            raise ShapeError(f"pad_reflect: pad ({b},{e}) too large for extent {s}")
    idx = []
    for (b, e), s in zip(width, a.data.shape):
        base = np.arange(-b, s + e)
        # reflect without repeating the border sample
        base = np.abs(base)
        base = np.where(base >= s, 2 * (s - 1) - base, base)
        idx.append(base)
    out = a.data
    for ax, im in enumerate(idx):
        if im.shape[0] != a.data.shape[ax] or (im != np.arange(a.data.shape[ax])).any():
            out = np.take(out, im, axis=ax)
    out = np.ascontiguousarray(out)

    def bwd(g):
        dg = g
        for ax, im in enumerate(idx):
            if im.shape[0] == a.data.shape[ax] and (im == np.arange(a.data.shape[ax])).all():
                continue
            acc = np.zeros(dg.shape[:ax] + (a.data.shape[ax],) + dg.shape[ax + 1:],
                           dtype=dg.dtype)
            mv_acc = np.moveaxis(acc, ax, 0)
            mv_g = np.moveaxis(dg, ax, 0)
            np.add.at(mv_acc, im, mv_g)
            dg = acc
        return (dg,)

    return _make("pad_reflect", out, (a,), bwd)


def crop(a, axis_slices):
    """Crop with per-axis (start, stop); axes omitted stay whole."""
    sl = [slice(None)] * a.data.ndim
    for ax, (s0, s1) in axis_slices.items():
        sl[ax] = slice(s0, s1)
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _make("crop", out, (a,), bwd)


def index_select(a, idx):
    """Rows of a 2-D tensor gathered by a flat integer index array."""
    idx = np.asarray(idx)
    out = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _make("index_select", out, (a,), bwd)


# --------------------------------------------------------------------------
# pixel shuffle / unshuffle (exact index permutations)
# --------------------------------------------------------------------------

def pixel_shuffle(a, r):
    b, c, h, w = a.data.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    out = (a.data.reshape(b, co, r, r, h, w)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(b, co, h * r, w * r))
    out = np.ascontiguousarray(out)

    def bwd(g):
        gg = (g.reshape(b, co, h, r, w, r)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(b, c, h, w))
        return (np.ascontiguousarray(gg),)

    return _make("pixel_shuffle", out, (a,), bwd)


def pixel_unshuffle(a, r):
    b, c, h, w = a.data.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims ({h},{w}) not divisible by r={r}")
    ho, wo = h // r, w // r
    out = (a.data.reshape(b, c, ho, r, wo, r)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(b, c * r * r, ho, wo))
    out = np.ascontiguousarray(out)

    def bwd(g):
        gg = (g.reshape(b, c, r, r, ho, wo)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(b, c, h, w))
        return (np.ascontiguousarray(gg),)

    return _make("pixel_unshuffle", out, (a,), bwd)


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with broadcastable batch dims."""
    _binary_dtypes("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make("matmul", out, (a, b), bwd)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _conv_check(x, w, stride, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d: x must be [B,C,H,W] and w [O,C/g,kh,kw]")
    b, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels ({cin}->{cout}) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: weight expects {cin_g} input channels/group, "
                         f"got {cin}//{groups}={cin // groups}")
    return b, cin, h, wd, cout, kh, kw


def conv2d(x, w, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation over NCHW input, zero padding, square stride.

    groups=1 is dense; groups == C_in == C_out is depthwise. Both hit
    vectorized paths; other group counts fall back to a per-group loop.
    """
    _binary_dtypes("conv2d", x, w)
    b, cin, h, wd, cout, kh, kw = _conv_check(x.data, w.data, stride, groups)
    s = int(stride)
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    bias_arr = None
    if bias is not None:
        _binary_dtypes("conv2d", x, bias)
        if bias.data.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
        bias_arr = bias.data

    if kh == 1 and kw == 1 and s == 1 and groups == 1:
        out, bwd = _conv1x1(x, w, bias, xp, b, cin, cout, ho, wo)
    elif groups == cin and groups == cout:
        out, bwd = _conv_depthwise(x, w, bias, xp, p, s, kh, kw, ho, wo)
    elif groups == 1:
        out, bwd = _conv_im2col(x, w, bias, xp, p, s, kh, kw, ho, wo)
    else:
        out, bwd = _conv_grouped(x, w, bias, xp, p, s, kh, kw, ho, wo, groups)

    if bias_arr is not None:
        out = out + bias_arr.reshape(1, cout, 1, 1)
    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("conv2d", np.ascontiguousarray(out), inputs, bwd)


def _unpad_hw(g, p):
    return np.ascontiguousarray(g[:, :, p:g.shape[2] - p, p:g.shape[3] - p]) if p else g


def _conv1x1(x, w, bias, xp, b, cin, cout, ho, wo):
    x2 = xp.reshape(b, cin, ho * wo)
    w2 = w.data.reshape(cout, cin)
    out = np.matmul(w2, x2).reshape(b, cout, ho, wo)

    def bwd(g):
        g2 = g.reshape(b, cout, ho * wo)
        dx = np.matmul(w2.T, g2).reshape(b, cin, ho, wo)
        dw = np.tensordot(g2, x2, axes=([0, 2], [0, 2])).reshape(w.data.shape)
        grads = [np.ascontiguousarray(dx), dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return out, bwd


def _conv_depthwise(x, w, bias, xp, p, s, kh, kw, ho, wo):
    c = xp.shape[1]
    wk = w.data.reshape(c, kh, kw)
    out = np.zeros((xp.shape[0], c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + s * ho:s, j:j + s * wo:s] * wk[:, i, j].reshape(1, c, 1, 1)

    def bwd(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(wk)
        for i in range(kh):
            for j in range(kw):
                sl = np.s_[:, :, i:i + s * ho:s, j:j + s * wo:s]
                dxp[sl] += g * wk[:, i, j].reshape(1, c, 1, 1)
                dw[:, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        grads = [_unpad_hw(dxp, p), dw.reshape(w.data.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return out, bwd


def _im2col(xp, s, kh, kw, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # [B,C,Ho,Wo,kh,kw] -> [B*Ho*Wo, C*kh*kw]
    b, c = xp.shape[0], xp.shape[1]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, c * kh * kw)


def _col2im(gcol, xp_shape, s, kh, kw, ho, wo):
    b, c = xp_shape[0], xp_shape[1]
    g6 = gcol.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(xp_shape, dtype=gcol.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += g6[:, :, :, :, i, j]
    return dxp


def _conv_im2col(x, w, bias, xp, p, s, kh, kw, ho, wo):
    b, cin = xp.shape[0], xp.shape[1]
    cout = w.data.shape[0]
    col = _im2col(xp, s, kh, kw, ho, wo)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = (col @ w2.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
        dw = (g2.T @ col).reshape(w.data.shape)
        dxp = _col2im(g2 @ w2, xp.shape, s, kh, kw, ho, wo)
        grads = [_unpad_hw(dxp, p), dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return out, bwd


def _conv_grouped(x, w, bias, xp, p, s, kh, kw, ho, wo, groups):
    b, cin = xp.shape[0], xp.shape[1]
    cout = w.data.shape[0]
    cg_in, cg_out = cin // groups, cout // groups
    cols = []
    outs = []
    for gi in range(groups):
        xg = xp[:, gi * cg_in:(gi + 1) * cg_in]
        col = _im2col(xg, s, kh, kw, ho, wo)
        cols.append(col)
        w2 = w.data[gi * cg_out:(gi + 1) * cg_out].reshape(cg_out, cg_in * kh * kw)
        outs.append((col @ w2.T).reshape(b, ho, wo, cg_out))
    out = np.concatenate(outs, axis=3).transpose(0, 3, 1, 2)

    def bwd(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(w.data)
        for gi in range(groups):
            gg = np.ascontiguousarray(
                g[:, gi * cg_out:(gi + 1) * cg_out].transpose(0, 2, 3, 1)
            ).reshape(b * ho * wo, cg_out)
            w2 = w.data[gi * cg_out:(gi + 1) * cg_out].reshape(cg_out, cg_in * kh * kw)
            dw[gi * cg_out:(gi + 1) * cg_out] = (gg.T @ cols[gi]).reshape(cg_out, cg_in, kh, kw)
            dxp[:, gi * cg_in:(gi + 1) * cg_in] = _col2im(
                gg @ w2, (b, cg_in) + xp.shape[2:], s, kh, kw, ho, wo)
        grads = [_unpad_hw(dxp, p), dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return out, bwd


# --------------------------------------------------------------------------
# unfold (overlapping patch extraction, nn.Unfold layout)
# --------------------------------------------------------------------------

def unfold(x, kernel, stride, padding):
    """[B,C,H,W] -> [B, C*k*k, L]; channel-major (c, ki, kj) rows, L row-major."""
    if x.data.ndim != 4:
        raise ShapeError("unfold: input must be [B,C,H,W]")
    k, s, p = int(kernel), int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    b, c, hp, wp = xp.shape
    nh = (hp - k) // s + 1
    nw = (wp - k) // s + 1
    if nh <= 0 or nw <= 0:
        raise ShapeError("unfold: kernel larger than padded input")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, nh * nw)

    def bwd(g):
        g6 = g.reshape(b, c, k, k, nh, nw)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * nh:s, j:j + s * nw:s] += g6[:, :, i, j]
        return (_unpad_hw(dxp, p),)

    return _make("unfold", out, (x,), bwd)


# --------------------------------------------------------------------------
# bilinear interpolation (separable, align_corners=False)
# --------------------------------------------------------------------------

def _resize_matrix(n_out, n_in, dtype):
    # dense [n_out, n_in] row-stochastic sampling matrix; identity when sizes match
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), (1.0 - f).astype(dtype))
    np.add.at(m, (rows, i1), f.astype(dtype))
    return m


def interpolate_bilinear(x, out_h, out_w):
    """Resize the trailing two axes of [B,C,H,W]; exact identity at same size."""
    if x.data.ndim != 4:
        raise ShapeError("interpolate_bilinear: input must be [B,C,H,W]")
    b, c, h, w = x.data.shape
    if out_h == h and out_w == w:
        return _make("interpolate_bilinear", x.data.copy(), (x,), lambda g: (g,))
    mh = _resize_matrix(out_h, h, x.data.dtype)
    mw = _resize_matrix(out_w, w, x.data.dtype)
    tmp = np.einsum("oh,bchw->bcow", mh, x.data, optimize=True)
    out = np.einsum("pw,bchw->bchp", mw, tmp, optimize=True)

    def bwd(g):
        t = np.einsum("pw,bchp->bchw", mw, g, optimize=True)
        dx = np.einsum("oh,bcow->bchw", mh, t, optimize=True)
        return (np.ascontiguousarray(dx),)

    return _make("interpolate_bilinear", np.ascontiguousarray(out), (x,), bwd)


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------

def finite_difference_check(fn, wrt, h=1e-4, rel_floor=1.0, max_coords=8, rng=None):
    """Compare tape gradients of scalar ``fn()`` against central differences.

    ``wrt`` is a list of float64 leaf tensors that ``fn`` closes over. Up to
    ``max_coords`` coordinates per tensor are perturbed (all, if the tensor is
    small). Returns the max relative error, with |a-n| / max(rel_floor,|a|,|n|)
    as the metric.
    """
    rng = rng or np.random.default_rng(0)
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ShapeError("finite_difference_check requires float64 tensors")
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    for t in wrt:
        t.zero_grad()

    worst = 0.0
    for t, a in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        n = flat.shape[0]
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f1 = fn().item()
            flat[c] = orig - h
            f2 = fn().item()
            flat[c] = orig
            num = (f1 - f2) / (2.0 * h)
            ana = a.reshape(-1)[c]
            err = abs(ana - num) / max(rel_floor, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
