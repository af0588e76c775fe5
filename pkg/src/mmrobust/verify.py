"""Interval bound propagation under weight boxes [theta - zeta|theta|, theta + zeta|theta|].

Every transfer function reduces to the concrete numpy operation, in the
same order, when all of its operands are degenerate, so zeta = 0 reproduces
concrete evaluation bit for bit. Verification works on pre-softmax logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffcore import ShapeError
from .diffcore.ops import conv2d_valid, maxpool2_np
from .models import CNN, MLP, SRNN, ParameterSet


@dataclass
class IntervalArray:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape:
            raise ShapeError(f"interval bounds differ in shape: {self.lo.shape} vs {self.hi.shape}")
        if np.any(self.lo > self.hi):
            raise ValueError("interval with lo > hi")

    @classmethod
    def point(cls, x) -> "IntervalArray":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, x)

    @property
    def shape(self):
        return self.lo.shape

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def is_degenerate(self) -> bool:
        return bool(np.array_equal(self.lo, self.hi))

    def contains(self, x, rtol: float = 0.0, atol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        slack_lo = atol + rtol * np.abs(self.lo)
        slack_hi = atol + rtol * np.abs(self.hi)
        return (x >= self.lo - slack_lo) & (x <= self.hi + slack_hi)

    def __add__(self, other: "IntervalArray") -> "IntervalArray":
        return IntervalArray(self.lo + other.lo, self.hi + other.hi)

    def __sub__(self, other: "IntervalArray") -> "IntervalArray":
        return IntervalArray(self.lo - other.hi, self.hi - other.lo)

    def scale(self, c: float) -> "IntervalArray":
        if c >= 0:
            return IntervalArray(self.lo * c, self.hi * c)
        return IntervalArray(self.hi * c, self.lo * c)

    def shift(self, c: float) -> "IntervalArray":
        return IntervalArray(self.lo + c, self.hi + c)


class SpikeState(IntEnum):
    NEVER = 0
    ALWAYS = 1
    UNCERTAIN = 2


def lift_weights(theta: ParameterSet, zeta: float) -> dict[str, IntervalArray]:
    """Box of every array; non-susceptible arrays are lifted as points."""
    if zeta < 0:
        raise ValueError(f"zeta must be non-negative, got {zeta}")
    out = {}
    for n in theta:
        th = np.asarray(theta[n], dtype=np.float64)
        if theta.susceptible[n] and zeta > 0:
            r = zeta * np.abs(th)
            out[n] = IntervalArray(th - r, th + r)
        else:
            out[n] = IntervalArray.point(th)
    return out


def interval_mul(a: IntervalArray, b: IntervalArray) -> IntervalArray:
    if a.is_degenerate() and b.is_degenerate():
        return IntervalArray.point(a.lo * b.lo)
    c = np.stack(np.broadcast_arrays(a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi))
    return IntervalArray(c.min(axis=0), c.max(axis=0))


def _neg(x):
    return np.minimum(x, 0.0)


def _pos(x):
    return np.maximum(x, 0.0)


def _bilinear(x: IntervalArray, w: IntervalArray, op, chunk: int = 64) -> IntervalArray:
    """Tight interval image of a bilinear map ``op`` (matmul or convolution).

    Per product term the bounds are the min/max of the four corner products.
    Nonnegative or degenerate ``x`` allow an exact decomposition into four
    concrete calls of ``op``; otherwise the terms are expanded explicitly.
    """
    if x.is_degenerate() and w.is_degenerate():
        v = op(x.lo, w.lo)
        return IntervalArray(v, v)
    if x.is_degenerate():
        xp, xn = _pos(x.lo), _neg(x.lo)
        return IntervalArray(op(xp, w.lo) + op(xn, w.hi), op(xp, w.hi) + op(xn, w.lo))
    if np.all(x.lo >= 0):
        return IntervalArray(
            op(x.lo, _pos(w.lo)) + op(x.hi, _neg(w.lo)),
            op(x.hi, _pos(w.hi)) + op(x.lo, _neg(w.hi)),
        )
    if op is not np.matmul:
        raise NotImplementedError("mixed-sign interval inputs are only supported for dense layers")
    lo = np.empty((x.shape[0], w.shape[1]))
    hi = np.empty_like(lo)
    for s in range(0, x.shape[0], chunk):
        xl, xh = x.lo[s : s + chunk, :, None], x.hi[s : s + chunk, :, None]
        corners = np.stack([xl * w.lo, xl * w.hi, xh * w.lo, xh * w.hi])
        lo[s : s + chunk] = corners.min(axis=0).sum(axis=1)
        hi[s : s + chunk] = corners.max(axis=0).sum(axis=1)
    return IntervalArray(lo, hi)


def interval_affine(W: IntervalArray, x: IntervalArray, b: IntervalArray | None = None) -> IntervalArray:
    """x @ W + b for batch rows ``x`` (N x n) and weights ``W`` (n x m)."""
    if x.lo.ndim != 2 or W.lo.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"interval_affine: incompatible shapes {x.shape} and {W.shape}")
    out = _bilinear(x, W, np.matmul)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ShapeError(f"interval_affine: bias shape {b.shape} != ({W.shape[1]},)")
        out = out + b
    return out


def interval_conv(x: IntervalArray, k: IntervalArray, b: IntervalArray | None = None) -> IntervalArray:
    """Valid stride-1 convolution of NHWC ``x`` with kh x kw x C x O ``k``."""
    if x.lo.ndim != 4 or k.lo.ndim != 4 or x.shape[3] != k.shape[2]:
        raise ShapeError(f"interval_conv: incompatible shapes {x.shape} and {k.shape}")
    if x.is_degenerate() or np.all(x.lo >= 0):
        out = _bilinear(x, k, conv2d_valid)
    else:
        # expand to patches and reuse the dense rule
        kh, kw, c, o = k.shape
        n, h, w = x.shape[:3]
        ho, wo = h - kh + 1, w - kw + 1

        def patches(a):
            win = sliding_window_view(a, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
            return win.reshape(n * ho * wo, kh * kw * c)

        flat = interval_affine(
            IntervalArray(k.lo.reshape(-1, o), k.hi.reshape(-1, o)),
            IntervalArray(patches(x.lo), patches(x.hi)),
        )
        out = IntervalArray(flat.lo.reshape(n, ho, wo, o), flat.hi.reshape(n, ho, wo, o))
    if b is not None:
        out = out + b
    return out


def interval_relu(x: IntervalArray) -> IntervalArray:
    return IntervalArray(np.maximum(x.lo, 0), np.maximum(x.hi, 0))


def interval_maxpool(x: IntervalArray) -> IntervalArray:
    return IntervalArray(maxpool2_np(x.lo), maxpool2_np(x.hi))


def spike_states(V: IntervalArray, B: IntervalArray) -> np.ndarray:
    """Threshold comparison o = 1(V > B) over intervals, as SpikeState codes."""
    state = np.full(V.shape, SpikeState.UNCERTAIN, dtype=np.int8)
    state[V.lo > B.hi] = SpikeState.ALWAYS
    state[V.hi <= B.lo] = SpikeState.NEVER
    return state


# -- network forwards -----------------------------------------------------


def _record(record, key, value):
    if record is not None:
        record.setdefault(key, []).append(value)


def _mlp_forward(model: MLP, w, x, record):
    h = IntervalArray.point(np.asarray(x, dtype=np.float64).reshape(len(x), -1))
    n_layers = len(model.widths()) - 1
    for i in range(n_layers):
        z = interval_affine(w[f"W{i}"], h, w[f"b{i}"])
        _record(record, f"pre{i}", z)
        h = interval_relu(z) if i < n_layers - 1 else z
    return h


def _cnn_forward(model: CNN, w, x, record):
    c = model.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim == 2:
        x = x.reshape(len(x), *c.image, 1)
    h = IntervalArray.point(x)
    for i in range(len(c.channels)):
        z = interval_conv(h, w[f"conv{i}_k"], w[f"conv{i}_b"])
        pooled = interval_maxpool(z)
        _record(record, f"conv{i}", z)
        _record(record, f"pool{i}", pooled)
        h = interval_relu(pooled)
    h = IntervalArray(h.lo.reshape(len(x), -1), h.hi.reshape(len(x), -1))
    n_fc = len(c.dense) + 1
    for i in range(n_fc):
        z = interval_affine(w[f"fc{i}_W"], h, w[f"fc{i}_b"])
        _record(record, f"fc{i}", z)
        h = interval_relu(z) if i < n_fc - 1 else z
    return h


def _srnn_forward(model: SRNN, w, x, record):
    c = model.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != c.n_in:
        raise ShapeError(f"srnn: expected N x T x {c.n_in} input currents, got {x.shape}")
    n, T = x.shape[:2]
    zeros = np.zeros((n, c.hidden))
    V, b = IntervalArray.point(zeros), IntervalArray.point(zeros)
    refr_lo, refr_hi = zeros.copy(), zeros.copy()
    n_refr = float(c.n_refr)
    z_sum = None
    for t in range(T):
        B = b.scale(c.beta_ada).shift(c.b0)
        state = spike_states(V, B)
        # refr_hi == 0: certainly ready; refr_lo > 0: certainly refractory
        o_lo = ((state == SpikeState.ALWAYS) & (refr_hi == 0)).astype(np.float64)
        o_hi = ((state != SpikeState.NEVER) & (refr_lo == 0)).astype(np.float64)
        o = IntervalArray(o_lo, o_hi)
        _record(record, "V", V)
        _record(record, "B", B)
        _record(record, "o", o)
        # the counter is reloaded where a spike is certain, decremented where none is possible
        dec_lo, dec_hi = np.maximum(refr_lo - 1.0, 0.0), np.maximum(refr_hi - 1.0, 0.0)
        refr_lo = np.where(o_lo > 0, n_refr, dec_lo)
        refr_hi = np.where(o_hi > 0, n_refr, dec_hi)
        b_new = b.scale(c.rho_b) + o.scale((1.0 - c.rho_b) / c.dt)
        drive = interval_affine(w["W_in"], IntervalArray.point(x[:, t, :])) + interval_affine(
            w["W_rec"], o.scale(1.0 / c.dt)
        )
        V = V.scale(c.rho_v) + drive.scale(1.0 - c.rho_v) - interval_mul(o, B)
        b = b_new
        z_sum = o if z_sum is None else z_sum + o
    z_avg = z_sum.scale(1.0 / T)
    return interval_affine(w["W_out"], z_avg, w["b_out"])


def interval_forward(model, theta: ParameterSet, zeta: float, x, record: dict | None = None) -> IntervalArray:
    """Logit intervals of ``model`` over the weight box of radius ``zeta``.

    ``record`` collects per-layer intervals under the same keys the concrete
    ``logits(..., record=...)`` uses.
    """
    w = lift_weights(theta, zeta)
    if isinstance(model, MLP):
        return _mlp_forward(model, w, x, record)
    if isinstance(model, CNN):
        return _cnn_forward(model, w, x, record)
    if isinstance(model, SRNN):
        if model.config.relaxed_spikes:
            raise ValueError("interval propagation needs hard threshold spikes")
        return _srnn_forward(model, w, x, record)
    raise TypeError(f"no interval forward for {type(model).__name__}")


def interval_srnn_forward(model: SRNN, theta: ParameterSet, zeta: float, x, record=None) -> IntervalArray:
    return interval_forward(model, theta, zeta, x, record)


def verified_mask(logits: IntervalArray, labels) -> np.ndarray:
    """Per-row provable correctness for N x K logit intervals."""
    lo, hi = logits.lo, logits.hi
    if lo.ndim != 2 or lo.shape[1] < 2:
        raise ShapeError(f"need N x K logits with K >= 2, got {lo.shape}")
    labels = np.asarray(labels)
    rows = np.arange(len(lo))
    own_lo = lo[rows, labels]
    others = hi.copy()
    others[rows, labels] = -np.inf
    best_lo = lo.max(axis=1)
    return (own_lo >= best_lo) & (own_lo > others.max(axis=1))


def verified_correct(logits: IntervalArray, label: int) -> bool:
    """Correct class has the maximum lower bound and overlaps no other class."""
    lo, hi = np.atleast_2d(logits.lo), np.atleast_2d(logits.hi)
    return bool(verified_mask(IntervalArray(lo, hi), [label])[0])


def verified_accuracy(model, theta: ParameterSet, zeta: float, test, batch_size: int = 256) -> float:
    if zeta < 0:
        raise ValueError(f"zeta must be non-negative, got {zeta}")
    if len(test) == 0:
        raise ValueError("empty test set")
    hits = 0
    for s in range(0, len(test), batch_size):
        out = interval_forward(model, theta, zeta, test.x[s : s + batch_size])
        hits += int(verified_mask(out, test.y[s : s + batch_size]).sum())
    return hits / len(test)


def clean_accuracy64(model, theta: ParameterSet, test) -> float:
    """Concrete binary64 accuracy, the reference for zero-radius verification."""
    logits = model.predict_logits(theta, test.x, dtype=np.float64)
    return float(np.mean(logits.argmax(axis=1) == test.y))
