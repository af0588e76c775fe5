"""Finite-difference audit of every primitive and of tiny instances of the three architectures."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import RngStream, finite_difference_check
from .models import CNN, MLP, SRNN, CnnConfig, MlpConfig, SrnnConfig


def _away_from(x, points, margin=0.05):
    # push entries off kinks so a central difference never straddles one
    x = np.array(x, dtype=np.float64)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + margin * np.where(x[close] >= p, 1.0, -1.0) * 2
    return x


def _probe(tape, node, rng):
    """Scalar sum(node * R) with a fixed random R, so every output entry matters."""
    r = rng.normal(node.shape)
    return dc.total(dc.mul(node, r))


def _unary(fn, x, rng):
    def build(t):
        return _probe(t, fn(t.var("x", x)), rng.fork("probe"))

    return build, {"x": x}


def _binary(fn, a, b, rng):
    def build(t):
        return _probe(t, fn(t.var("a", a), t.var("b", b)), rng.fork("probe"))

    return build, {"a": a, "b": b}


def primitive_cases(rng: RngStream) -> dict:
    n = rng.fork("inputs")
    m34 = n.fork(0).normal((3, 4))
    probs = dc.softmax_np(n.fork(1).normal((4, 5)))
    q = dc.softmax_np(n.fork(2).normal((4, 5)))
    onehot = np.eye(5)[[0, 3, 1, 4]]
    img = n.fork(3).normal((2, 5, 5, 2))
    kern = n.fork(4).normal((2, 2, 2, 3))
    pool_in = n.fork(5).permutation(2 * 5 * 5 * 2).reshape(2, 5, 5, 2) / 10.0  # distinct, so no ties
    V = _away_from(n.fork(6).normal((3, 4)) + 1.0, [0.0, 1.0, 2.0])
    B = np.full((3, 4), 1.0)
    return {
        "add": _binary(dc.add, m34, n.fork(7).normal((4,)), rng.fork("add")),
        "sub": _binary(dc.sub, m34, n.fork(8).normal((3, 4)), rng.fork("sub")),
        "mul": _binary(dc.mul, m34, n.fork(9).normal((3, 1)), rng.fork("mul")),
        "scale": _unary(lambda x: dc.scale(x, -1.7), m34, rng.fork("scale")),
        "relu": _unary(dc.relu, _away_from(m34, [0.0]), rng.fork("relu")),
        "abs": _unary(dc.absolute, _away_from(m34, [0.0]), rng.fork("abs")),
        "sign": _unary(dc.sign, _away_from(m34, [0.0]), rng.fork("sign")),
        "clamp": _unary(lambda x: dc.clamp(x, -0.5, 0.5), _away_from(m34, [-0.5, 0.5]), rng.fork("clamp")),
        "reshape": _unary(lambda x: dc.reshape(x, (2, 6)), m34, rng.fork("reshape")),
        "sum": _unary(lambda x: dc.total(x, axis=0), m34, rng.fork("sum")),
        "matmul": _binary(dc.matmul, m34, n.fork(10).normal((4, 2)), rng.fork("matmul")),
        "conv2d": _binary(dc.conv2d, img, kern, rng.fork("conv2d")),
        "maxpool2": _unary(dc.maxpool2, pool_in, rng.fork("maxpool2")),
        "softmax": _unary(dc.softmax, m34, rng.fork("softmax")),
        "cross_entropy": _unary(lambda p: dc.cross_entropy(p, onehot), probs, rng.fork("xent")),
        "kl": _binary(dc.kl_div, probs, q, rng.fork("kl")),
        # relaxed twin: its exact derivative in V is the surrogate used by the hard spike
        "spike_surrogate": _unary(lambda v: dc.spike(v, B, 0.3, relaxed=True), V, rng.fork("spike")),
    }


def _model_case(model, params, x, onehot):
    def build(t):
        p = {k: t.var(k, params[k]) for k in params}
        return dc.cross_entropy(model.forward(t, p, x), onehot)

    return build, dict(params.arrays)


def architecture_cases(rng: RngStream) -> dict:
    mlp = MLP(MlpConfig(n_in=6, hidden=(5, 4), n_classes=3))
    cnn = CNN(CnnConfig(image=(7, 7), channels=(2, 3), kernel=2, dense=(4,), n_classes=3))
    srnn = SRNN(SrnnConfig(n_in=2, hidden=4, n_classes=3, beta_ada=0.0, relaxed_spikes=True))
    x = rng.fork("x")
    y = np.eye(3)[[0, 2, 1]]
    ps = srnn.init(rng.fork("srnn")).astype(np.float64)
    ps = ps.replace({"W_in": ps["W_in"] * 4.0, "W_rec": ps["W_rec"] * 0.5})
    return {
        "mlp": _model_case(mlp, mlp.init(rng.fork("mlp")), x.fork(0).normal((3, 6)), y),
        "cnn": _model_case(cnn, cnn.init(rng.fork("cnn")), x.fork(1).uniform((3, 7, 7)), y),
        "srnn": _model_case(srnn, ps, 3.0 * x.fork(2).normal((3, 5, 2)), y),
    }


def surrogate_consistency(rng: RngStream) -> float:
    """Hard-spike backward against the derivative of the relaxed twin, off the kinks."""
    v = _away_from(rng.normal((50,)) + 1.0, [0.0, 1.0, 2.0])
    b = np.ones(50)
    t = dc.Tape(np.float64)
    vn = t.var("v", v)
    out = dc.total(dc.spike(vn, b, 0.3))
    g = t.gradient(out)["v"]
    h = 1e-6
    relaxed = lambda z: 0.3 * b * dc.ops._ramp((z - b) / b)  # noqa: E731
    numeric = (relaxed(v + h) - relaxed(v - h)) / (2 * h)
    return float(np.max(np.abs(g - numeric) / np.maximum(1.0, np.abs(numeric))))


def run_suite(seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error per check, all at binary64."""
    rng = RngStream(seed).fork("gradcheck")
    errors = {}
    for name, (build, params) in primitive_cases(rng.fork("primitives")).items():
        errors[name] = finite_difference_check(build, params, step)
    for name, (build, params) in architecture_cases(rng.fork("architectures")).items():
        errors[name] = finite_difference_check(build, params, step)
    errors["spike_hard_vs_relaxed"] = surrogate_consistency(rng.fork("surrogate"))
    return errors
