"""Reverse-mode automatic differentiation over dense float tensors.

A :class:`Tensor` wraps a contiguous numpy array (float32 by default).
Operations executed while a :class:`Tape` is active record backward
closures; :func:`backward` replays them in reverse to populate ``.grad``
on every reachable tensor with ``requires_grad`` set. Gradients
accumulate additively, so callers zero them between steps.

The :func:`float64_shadow` context switches newly created tensors to
float64; the gradient-check tests run under it so finite-difference
tolerances are meaningful.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

from . import backend


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Backward invoked without a usable tape/loss."""


_DEFAULT_DTYPE = np.float32
_active_dtype = _DEFAULT_DTYPE
_active_tape: "Tape | None" = None
_CHECK_FINITE = os.environ.get("PSTMAE_CHECK_FINITE", "0") == "1"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def active_dtype():
    return _active_dtype


@contextmanager
def float64_shadow():
    """Create tensors in float64 inside the block (gradient-check mode)."""
    global _active_dtype
    prev = _active_dtype
    _active_dtype = np.float64
    try:
        yield
    finally:
        _active_dtype = prev


class Tensor:
    """Dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        # asarray keeps 0-d shapes (ascontiguousarray would promote them to 1-D)
        self.data = np.asarray(data, dtype=_active_dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class Tape:
    """Ordered record of executed ops (outputs plus backward closures)."""

    def __init__(self):
        self._records = []

    def record(self, out, fn):
        self._records.append((out, fn))

    def clear(self):
        self._records.clear()

    def __len__(self):
        return len(self._records)


@contextmanager
def tape():
    """Activate a fresh tape for the block; records are freed on exit."""
    global _active_tape
    if _active_tape is not None:
        raise TapeError("tapes do not nest; one training step per tape")
    t = Tape()
    _active_tape = t
    try:
        yield t
    finally:
        _active_tape = None
        t.clear()


def backward(loss):
    """Accumulate d(loss)/d(tensor) into .grad for all reachable tensors."""
    if _active_tape is None:
        raise TapeError("backward requires an active tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for out, fn in reversed(_active_tape._records):
        g = out.grad
        if g is not None:
            fn(g)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(inputs, out_data, fn):
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by forward op")
    req = _active_tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, req)
    if req:
        _active_tape.record(out, fn)
    return out


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    _check_same_shape(a, b, "add")

    def _bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make((a, b), a.data + b.data, _bwd)


def sub(a, b):
    _check_same_shape(a, b, "sub")

    def _bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make((a, b), a.data - b.data, _bwd)


def mul(a, b):
    _check_same_shape(a, b, "mul")

    def _bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make((a, b), a.data * b.data, _bwd)


def scale(a, c):
    c = float(c)

    def _bwd(g):
        _accum(a, g * c)

    return _make((a,), a.data * c, _bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes must match."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim:
        raise ShapeError(f"matmul: rank mismatch {ad.shape} vs {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} vs {bd.shape}")

    def _bwd(g):
        _accum(a, g @ bd.swapaxes(-1, -2))
        _accum(b, ad.swapaxes(-1, -2) @ g)

    return _make((a, b), ad @ bd, _bwd)


def linear(x, w, b):
    """Affine map over the last axis: y = x @ w + b."""
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or bd.ndim != 1 or xd.shape[-1] != wd.shape[0] or bd.shape[0] != wd.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {xd.shape}, {wd.shape}, {bd.shape}")
    d_in, d_out = wd.shape

    def _bwd(g):
        g2 = g.reshape(-1, d_out)
        x2 = xd.reshape(-1, d_in)
        _accum(w, x2.T @ g2)
        _accum(b, g2.sum(axis=0))
        _accum(x, (g2 @ wd.T).reshape(xd.shape))

    return _make((x, w, b), xd @ wd + bd, _bwd)


# ---------------------------------------------------------------------------
# convolutions (3x3, zero padding 1)


def _as_batch(xd):
    if xd.ndim == 3:
        return xd[None], True
    if xd.ndim == 4:
        return xd, False
    raise ShapeError(f"conv: input must be (C,H,W) or (N,C,H,W), got {xd.shape}")


def _check_kernel(kd, c_in, op):
    if kd.ndim != 4 or kd.shape[2:] != (3, 3):
        raise ShapeError(f"{op}: kernel must be (O,C,3,3), got {kd.shape}")
    if kd.shape[1] != c_in and op == "conv2d":
        raise ShapeError(f"{op}: kernel expects {kd.shape[1]} input channels, got {c_in}")


def conv2d(x, kernel, stride=1, bias=None):
    """3x3 cross-correlation with zero padding 1 and stride 1 or 2.

    x: (C,H,W) or (N,C,H,W); kernel: (O,C,3,3); bias: (O,) or None.
    """
    xd, squeeze = _as_batch(x.data)
    kd = kernel.data
    n, c, h, w = xd.shape
    _check_kernel(kd, c, "conv2d")
    if kd.shape[1] != c:
        raise ShapeError(f"conv2d: kernel expects {kd.shape[1]} channels, input has {c}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if h % stride or w % stride:
        raise ShapeError(f"conv2d: spatial dims {(h, w)} not divisible by stride {stride}")
    out = backend.conv_fwd(xd, kd, stride)
    inputs = [x, kernel]
    if bias is not None:
        if bias.data.shape != (kd.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({kd.shape[0]},)")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def _bwd(g):
        g4 = g[None] if squeeze else g
        dx = backend.conv_input_grad(np.ascontiguousarray(g4), kd, stride, h, w)
        _accum(x, dx[0] if squeeze else dx)
        _accum(kernel, backend.conv_kernel_grad(xd, np.ascontiguousarray(g4), stride))
        if bias is not None:
            _accum(bias, g4.sum(axis=(0, 2, 3)))

    return _make(tuple(inputs), out[0] if squeeze else out, _bwd)


def conv2d_transpose(x, kernel, stride=2, bias=None):
    """Adjoint of :func:`conv2d`: spatial dims multiply by ``stride``.

    x: (O,h,w) or (N,O,h,w); kernel: (O,C,3,3) shared with the paired
    forward convolution; bias: (C,) or None.
    """
    xd, squeeze = _as_batch(x.data)
    kd = kernel.data
    n, o, h_in, w_in = xd.shape
    _check_kernel(kd, o, "conv2d_transpose")
    if kd.shape[0] != o:
        raise ShapeError(f"conv2d_transpose: kernel expects {kd.shape[0]} channels, input has {o}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d_transpose: stride must be 1 or 2, got {stride}")
    h, w = h_in * stride, w_in * stride
    out = backend.conv_input_grad(xd, kd, stride, h, w)
    inputs = [x, kernel]
    if bias is not None:
        if bias.data.shape != (kd.shape[1],):
            raise ShapeError(f"conv2d_transpose: bias shape {bias.data.shape} != ({kd.shape[1]},)")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def _bwd(g):
        g4 = np.ascontiguousarray(g[None] if squeeze else g)
        dx = backend.conv_fwd(g4, kd, stride)
        _accum(x, dx[0] if squeeze else dx)
        _accum(kernel, backend.conv_kernel_grad(g4, xd, stride))
        if bias is not None:
            _accum(bias, g4.sum(axis=(0, 2, 3)))

    return _make(tuple(inputs), out[0] if squeeze else out, _bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(x):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def _bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        _accum(x, g * (cdf + xd * pdf))

    return _make((x,), xd * cdf, _bwd)


def sigmoid(x):
    s = expit(x.data)

    def _bwd(g):
        _accum(x, g * s * (1.0 - s))

    return _make((x,), s, _bwd)


def tanh(x):
    t = np.tanh(x.data)

    def _bwd(g):
        _accum(x, g * (1.0 - t * t))

    return _make((x,), t, _bwd)


def softmax_lastdim(x):
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def _bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _make((x,), y, _bwd)


def layer_norm_lastdim(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    d = xd.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match last dim")
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv

    def _bwd(g):
        lead = tuple(range(xd.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        gy = g * gain.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (gy - m1 - xhat * m2) * inv)

    return _make((x, gain, bias), xhat * gain.data + bias.data, _bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def _bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _make((x,), out, _bwd)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def _bwd(g):
        _accum(x, g.transpose(inv))

    return _make((x,), np.ascontiguousarray(x.data.transpose(axes)), _bwd)


def gather_rows(x, indices):
    """Select rows along axis 0; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or (x.data.shape[0] and (idx.min() < 0 or idx.max() >= x.data.shape[0])):
        raise ShapeError(f"gather_rows: bad indices for first dim {x.data.shape[0]}")

    def _bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _make((x,), x.data[idx].copy(), _bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), _bwd)


# ---------------------------------------------------------------------------
# losses


def mse(pred, target):
    """Mean of squared elementwise differences (scalar output)."""
    _check_same_shape(pred, target, "mse")
    diff = pred.data - target.data
    val = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def _bwd(g):
        c = g * (2.0 / diff.size)
        _accum(pred, c * diff)
        _accum(target, -c * diff)

    return _make((pred, target), val, _bwd)
