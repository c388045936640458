"""Dense float32 tensors with reverse-mode autodiff on an explicit tape.

Shapes are explicit everywhere: the only implicit broadcast allowed is
adding a 1-D bias row to every row of a 2-D tensor.  Forward math is
plain numpy, so two runs over identical inputs are bit-identical.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


_ACTIVE_TAPE = None


class GradTape:
    """Ordered record of primitive ops; backward replays it in reverse."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested GradTape not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss):
        if loss.data.ndim != 0:
            raise ShapeError("backward requires a scalar loss")
        if not np.isfinite(loss.data):
            raise NumericError("non-finite loss")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, inputs, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = backward_fn()
            for inp, g in zip(inputs, grads):
                if g is None or not isinstance(inp, Tensor):
                    continue
                if inp.grad is None:
                    inp.grad = np.asarray(g, dtype=inp.data.dtype).copy()
                else:
                    inp.grad += g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data, inputs, backward_fn):
    out = Tensor(out_data, dtype=out_data.dtype)
    if _ACTIVE_TAPE is not None and any(
        i.requires_grad for i in inputs if isinstance(i, Tensor)
    ):
        out.requires_grad = True
        _ACTIVE_TAPE.record(out, inputs, backward_fn(out))
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        pass
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        pass  # row-wise bias
    elif a.data.ndim == 2 and b.data.shape == (1, a.shape[1]):
        pass  # single row broadcast over all rows
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data + b.data

    def bw(out):
        def run():
            g = out.grad
            if b.data.shape == g.shape:
                gb = g
            elif b.data.ndim == 1:
                gb = g.sum(axis=0)
            else:
                gb = g.sum(axis=0, keepdims=True)
            return g, gb
        return run

    return _make(out_data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data - b.data

    def bw(out):
        def run():
            return out.grad, -out.grad
        return run

    return _make(out_data, (a, b), bw)


def mul(a, b):
    if np.isscalar(b):
        return scale(a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data * b.data

    def bw(out):
        def run():
            return out.grad * b.data, out.grad * a.data
        return run

    return _make(out_data, (a, b), bw)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    out_data = a.data * a.data.dtype.type(c)

    def bw(out):
        def run():
            return (out.grad * a.data.dtype.type(c),)
        return run

    return _make(out_data, (a,), bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bw(out):
        def run():
            g = out.grad
            return g @ b.data.T, a.data.T @ g
        return run

    return _make(out_data, (a, b), bw)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    out_data = a.data.T.copy()

    def bw(out):
        def run():
            return (out.grad.T.copy(),)
        return run

    return _make(out_data, (a,), bw)


def softmax_rows(x):
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows: non-finite input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        def run():
            g = out.grad
            y = out.data
            dot = (g * y).sum(axis=1, keepdims=True)
            return (y * (g - dot),)
        return run

    return _make(out_data, (x,), bw)


def layernorm(x, eps=1e-5):
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError("layernorm expects a 2-D tensor with last dim >= 1")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv
    out_data = xhat.astype(x.data.dtype)

    def bw(out):
        def run():
            g = out.grad
            n = x.shape[1]
            gmean = g.mean(axis=1, keepdims=True)
            gx = (g * xhat).mean(axis=1, keepdims=True)
            return (inv * (g - gmean - xhat * gx),)
        return run

    return _make(out_data, (x,), bw)


def gelu(x):
    """tanh-approximated GELU."""
    x = _as_tensor(x)
    c = x.data.dtype.type(np.sqrt(2.0 / np.pi))
    k = x.data.dtype.type(0.044715)
    inner = c * (x.data + k * x.data ** 3)
    t = np.tanh(inner)
    out_data = (0.5 * x.data * (1.0 + t)).astype(x.data.dtype)

    def bw(out):
        def run():
            sech2 = 1.0 - t * t
            dinner = c * (1.0 + 3.0 * k * x.data ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * x.data * sech2 * dinner
            return (out.grad * d.astype(x.data.dtype),)
        return run

    return _make(out_data, (x,), bw)


def tsum(x):
    x = _as_tensor(x)
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bw(out):
        def run():
            return (np.full_like(x.data, out.grad),)
        return run

    return _make(out_data, (x,), bw)


def tmean(x):
    x = _as_tensor(x)
    out_data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bw(out):
        def run():
            return (np.full_like(x.data, out.grad / x.data.size),)
        return run

    return _make(out_data, (x,), bw)


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_rows of empty list")
    cols = tensors[0].shape[1]
    if any(t.data.ndim != 2 or t.shape[1] != cols for t in tensors):
        raise ShapeError("concat_rows: column mismatch")
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def bw(out):
        def run():
            return tuple(np.split(out.grad, splits, axis=0))
        return run

    return _make(out_data, tuple(tensors), bw)


def slice_rows(x, lo, hi):
    x = _as_tensor(x)
    out_data = x.data[lo:hi].copy()

    def bw(out):
        def run():
            g = np.zeros_like(x.data)
            g[lo:hi] = out.grad
            return (g,)
        return run

    return _make(out_data, (x,), bw)


def slice_cols(x, lo, hi):
    x = _as_tensor(x)
    out_data = x.data[:, lo:hi].copy()

    def bw(out):
        def run():
            g = np.zeros_like(x.data)
            g[:, lo:hi] = out.grad
            return (g,)
        return run

    return _make(out_data, (x,), bw)


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    rows = tensors[0].shape[0]
    if any(t.data.ndim != 2 or t.shape[0] != rows for t in tensors):
        raise ShapeError("concat_cols: row mismatch")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bw(out):
        def run():
            return tuple(np.split(out.grad, splits, axis=1))
        return run

    return _make(out_data, tuple(tensors), bw)


def gather_rows(table, indices):
    """Embedding lookup; backward scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = table.data[idx].copy()

    def bw(out):
        def run():
            g = np.zeros_like(table.data)
            np.add.at(g, idx, out.grad)
            return (g,)
        return run

    return _make(out_data, (table,), bw)


def rope_pairs(x, cos, sin):
    """Rotate consecutive feature pairs of each row by fixed angles.

    cos/sin are constant arrays shaped like x with per-pair duplicated
    entries; out = x*cos + swap(x)*sin where swap maps (a, b) -> (-b, a).
    """
    x = _as_tensor(x)
    cos = np.asarray(cos, dtype=x.data.dtype)
    sin = np.asarray(sin, dtype=x.data.dtype)
    if cos.shape != x.shape or sin.shape != x.shape:
        raise ShapeError("rope_pairs: angle table shape mismatch")
    if x.shape[-1] % 2 != 0:
        raise ShapeError("rope_pairs: last dim must be even")
    out_data = x.data * cos + _pair_swap(x.data) * sin

    def bw(out):
        def run():
            g = out.grad
            return (g * cos + _pair_swap_t(g * sin),)
        return run

    return _make(out_data, (x,), bw)


def _pair_swap(a):
    # (a0, a1) -> (-a1, a0) per consecutive pair
    out = np.empty_like(a)
    out[..., 0::2] = -a[..., 1::2]
    out[..., 1::2] = a[..., 0::2]
    return out


def _pair_swap_t(a):
    # transpose of _pair_swap: (a0, a1) -> (a1, -a0)
    out = np.empty_like(a)
    out[..., 0::2] = a[..., 1::2]
    out[..., 1::2] = -a[..., 0::2]
    return out


def grad_check(f, x, h=1e-3):
    """Max relative error between analytic and central-difference grads.

    f must return a scalar Tensor when called on x inside a tape.
    """
    x.grad = None
    with GradTape() as tape:
        x.requires_grad = True
        loss = f(x)
        tape.backward(loss)
    analytic = x.grad.copy()
    if not np.isfinite(analytic).all():
        raise NumericError("grad_check: non-finite analytic gradient")
    flat = x.data.reshape(-1)
    num = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    rel = np.abs(a - num) / (np.abs(a) + 1e-8)
    return float(rel.max())
