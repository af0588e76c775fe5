"""Primitive forward/backward rules and their functional wrappers."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tape import Node, ShapeError, primitive

LOG_FLOOR = 1e-12


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ----------------------------------------------------------


@primitive("add", lambda g, out, aux, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
def _add(a, b):
    _check_broadcast("add", a, b)
    return a + b, None


@primitive("sub", lambda g, out, aux, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
def _sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b, None


@primitive("mul", lambda g, out, aux, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
def _mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b, None


@primitive("scale", lambda g, out, aux, a, c: (g * a.dtype.type(c),))
def _scale(a, c):
    return a * a.dtype.type(c), None


@primitive("relu", lambda g, out, aux, a: (g * (a > 0),))
def _relu(a):
    return np.maximum(a, 0), None


@primitive("abs", lambda g, out, aux, a: (g * np.sign(a),))
def _abs(a):
    return np.abs(a), None


@primitive("sign", lambda g, out, aux, a: (np.zeros_like(a),))
def _sign(a):
    return np.sign(a), None


def _clamp_bwd(g, out, aux, a, lo, hi):
    inside = (a >= lo) & (a <= hi)
    return g * inside, None, None


@primitive("clamp", _clamp_bwd)
def _clamp(a, lo, hi):
    _check_broadcast("clamp", a, lo)
    _check_broadcast("clamp", a, hi)
    return np.minimum(np.maximum(a, lo), hi), None


@primitive("reshape", lambda g, out, aux, a, shape: (g.reshape(a.shape),))
def _reshape(a, shape):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None


def _sum_bwd(g, out, aux, a, axis):
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


@primitive("sum", _sum_bwd)
def _sum(a, axis=None):
    return a.sum(axis=axis), None


@primitive("nondiff", None)
def _nondiff(*vals, fn):
    return fn(*vals), None


# -- linear maps ----------------------------------------------------------


@primitive("matmul", lambda g, out, aux, a, b: (g @ b.T, a.T @ g))
def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, None


def conv2d_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid-padding, stride-1 convolution (cross-correlation).

    ``x`` is N x H x W x C, ``k`` is kh x kw x C x O.
    """
    kh, kw = k.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
    return np.tensordot(win, k, axes=([3, 4, 5], [2, 0, 1]))


def _conv_bwd(g, out, aux, x, k):
    kh, kw = k.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    dk = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))  # C, kh, kw, O
    dk = dk.transpose(1, 2, 0, 3)
    gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    kf = k[::-1, ::-1].transpose(0, 1, 3, 2)  # kh, kw, O, C
    dx = conv2d_valid(gp, kf)
    return dx, dk


@primitive("conv2d", _conv_bwd)
def _conv2d(x, k):
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and 4-D kernel, got {x.shape} and {k.shape}")
    if x.shape[3] != k.shape[2]:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} != kernel channels {k.shape[2]} ({x.shape}, {k.shape})")
    if x.shape[1] < k.shape[0] or x.shape[2] < k.shape[1]:
        raise ShapeError(f"conv2d: image {x.shape[1:3]} smaller than kernel {k.shape[:2]}")
    return conv2d_valid(x, k), None


def pool_windows(x: np.ndarray, fill) -> np.ndarray:
    """Reshape N x H x W x C into N x Ho x 2 x Wo x 2 x C, padding odd edges with ``fill``."""
    n, h, w, c = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=fill)
    return x.reshape(n, (h + ph) // 2, 2, (w + pw) // 2, 2, c)


def maxpool2_np(x: np.ndarray) -> np.ndarray:
    """2x2 stride-2 max-pool; odd trailing rows/columns form partial windows."""
    return pool_windows(x, -np.inf).max(axis=(2, 4))


def _pool_bwd(g, out, aux, x):
    n, h, w, c = x.shape
    win = pool_windows(x, -np.inf)
    ho, wo = win.shape[1], win.shape[3]
    flat = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    dflat = onehot * g[..., None]
    dwin = dflat.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    return (dwin[:, :h, :w, :],)


@primitive("maxpool2", _pool_bwd)
def _maxpool2(x):
    if x.ndim != 4:
        raise ShapeError(f"maxpool2: expected NHWC input, got {x.shape}")
    return maxpool2_np(x), None


# -- probability heads ----------------------------------------------------


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@primitive("softmax", lambda g, out, aux, z: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))
def _softmax(z):
    return softmax_np(z), None


def _xent_bwd(g, out, aux, p, y):
    n = p.shape[0]
    pf = np.maximum(p, LOG_FLOOR)
    dp = -(y / pf) * (p > LOG_FLOOR) / n
    return g * dp, None


@primitive("cross_entropy", _xent_bwd)
def _cross_entropy(p, y):
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeError(f"cross_entropy: probability rows {p.shape} vs one-hot labels {y.shape}")
    return -(y * np.log(np.maximum(p, LOG_FLOOR))).sum() / p.shape[0], None


def kl_rows_np(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row KL(p || q) with both arguments floored at 1e-12 inside the log."""
    lp = np.log(np.maximum(p, LOG_FLOOR))
    lq = np.log(np.maximum(q, LOG_FLOOR))
    return (p * (lp - lq)).sum(axis=-1)


def _kl_bwd(g, out, aux, p, q):
    n = p.shape[0]
    lp = np.log(np.maximum(p, LOG_FLOOR))
    lq = np.log(np.maximum(q, LOG_FLOOR))
    dp = (lp - lq + (p > LOG_FLOOR)) / n
    dq = -(p / np.maximum(q, LOG_FLOOR)) * (q > LOG_FLOOR) / n
    return g * dp, g * dq


@primitive("kl", _kl_bwd)
def _kl(p, q):
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeError(f"kl: row shapes differ, {p.shape} vs {q.shape}")
    return kl_rows_np(p, q).sum() / p.shape[0], None


# -- spiking threshold ----------------------------------------------------


def surrogate_np(v, b, d):
    """Pseudo-derivative d * max(1 - |(v - b)/b|, 0)."""
    return d * np.maximum(1.0 - np.abs((v - b) / b), 0.0)


def _ramp(x):
    # antiderivative of the unit triangle max(1 - |x|, 0), rising from 0 to 1
    x = np.clip(x, -1.0, 1.0)
    return np.where(x <= 0, 0.5 * (x + 1.0) ** 2, 1.0 - 0.5 * (1.0 - x) ** 2)


def _spike_bwd(g, out, aux, v, b, d, relaxed=False):
    return g * surrogate_np(v, b, d), None


@primitive("spike", _spike_bwd)
def _spike(v, b, d, relaxed=False):
    if relaxed:
        # smooth twin whose exact derivative in v is the surrogate; for gradient checks
        return d * b * _ramp((v - b) / b), None
    return (v > b).astype(v.dtype), None


# -- functional API -------------------------------------------------------


def _t(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a tape Node")


def _lift(tape, x):
    return x if isinstance(x, Node) else tape.const(x)


def add(a, b):
    t = _t(a, b)
    return t.apply("add", _lift(t, a), _lift(t, b))


def sub(a, b):
    t = _t(a, b)
    return t.apply("sub", _lift(t, a), _lift(t, b))


def mul(a, b):
    t = _t(a, b)
    return t.apply("mul", _lift(t, a), _lift(t, b))


def scale(a: Node, c: float) -> Node:
    return a.tape.apply("scale", a, c=float(c))


def matmul(a, b):
    t = _t(a, b)
    return t.apply("matmul", _lift(t, a), _lift(t, b))


def conv2d(x, k):
    t = _t(x, k)
    return t.apply("conv2d", _lift(t, x), _lift(t, k))


def maxpool2(x: Node) -> Node:
    return x.tape.apply("maxpool2", x)


def relu(x: Node) -> Node:
    return x.tape.apply("relu", x)


def absolute(x: Node) -> Node:
    return x.tape.apply("abs", x)


def sign(x: Node) -> Node:
    return x.tape.apply("sign", x)


def clamp(x: Node, lo, hi) -> Node:
    t = x.tape
    return t.apply("clamp", x, _lift(t, lo), _lift(t, hi))


def reshape(x: Node, shape) -> Node:
    return x.tape.apply("reshape", x, shape=tuple(shape))


def total(x: Node, axis=None) -> Node:
    return x.tape.apply("sum", x, axis=axis)


def softmax(z: Node) -> Node:
    return z.tape.apply("softmax", z)


def cross_entropy(p: Node, onehot) -> Node:
    """Batch-mean categorical cross-entropy of probability rows."""
    t = p.tape
    return t.apply("cross_entropy", p, _lift(t, onehot))


def kl_div(p, q) -> Node:
    """Batch-mean KL(p || q) over probability rows."""
    t = _t(p, q)
    return t.apply("kl", _lift(t, p), _lift(t, q))


def spike(v: Node, b, d: float, relaxed: bool = False) -> Node:
    """Heaviside step 1(v > b) whose backward uses the triangular surrogate in v.

    The threshold ``b`` receives no gradient through this primitive.
    """
    t = v.tape
    return t.apply("spike", v, _lift(t, b), d=float(d), relaxed=bool(relaxed))
