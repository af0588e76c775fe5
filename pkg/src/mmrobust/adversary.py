"""Projected-gradient-ascent adversary in weight space and the robustness-regularised gradient.

The adversary searches the box [theta - zeta|theta|, theta + zeta|theta|]
with signed steps of size zeta|theta|/n_steps, maximising the KL divergence
between the nominal and attacked network outputs. Training combines the
task loss with beta times that divergence; the dependence of the attacked
weights on theta is approximated by a diagonal Jacobian built from the
accumulated step signs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import RngStream, Tape
from .models import ParameterSet


@dataclass
class AttackConfig:
    zeta_attack: float = 0.1
    n_steps: int = 10
    eps_init: float = 0.01
    beta_rob: float = 0.25

    def __post_init__(self):
        if self.zeta_attack < 0 or self.eps_init < 0 or self.beta_rob < 0:
            raise ValueError("zeta_attack, eps_init and beta_rob must be non-negative")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be at least 1")
        self.n_steps = int(self.n_steps)


@dataclass
class AttackTrace:
    """Per-entry sum of ascent-step signs and the initial jitter draw."""

    sign_sum: dict[str, np.ndarray]
    jitter: dict[str, np.ndarray]
    steps: list[dict[str, np.ndarray]] = field(default_factory=list)


def project_box(m, theta, zeta):
    """Clamp ``m`` into [theta - zeta|theta|, theta + zeta|theta|] elementwise."""
    if np.any(np.asarray(zeta) < 0):
        raise ValueError("zeta must be non-negative")
    m, theta = np.asarray(m), np.asarray(theta)
    if m.shape != theta.shape:
        raise dc.ShapeError(f"project_box: shape {m.shape} != {theta.shape}")
    eps = zeta * np.abs(theta)
    return np.minimum(np.maximum(m, theta - eps), theta + eps)


def pga(
    theta: ParameterSet,
    loss_grad: Callable[[ParameterSet], dict],
    zeta: float,
    n_steps: int,
    eps_init: float,
    rng: RngStream,
    record_steps: bool = False,
    on_step: Callable | None = None,
) -> tuple[ParameterSet, AttackTrace]:
    """Signed-step projected gradient ascent over the susceptible arrays of ``theta``.

    ``loss_grad(star)`` returns gradients of the ascended loss for the
    susceptible names at the candidate ``star``.
    """
    names = theta.names(susceptible_only=True)
    star, jitter, sign_sum = {}, {}, {}
    for n in names:
        th = theta[n]
        r = rng.normal(th.shape)
        jitter[n] = r
        start = (th + np.abs(th) * (eps_init * r)).astype(th.dtype)
        star[n] = project_box(start, th, zeta)
        sign_sum[n] = np.zeros(th.shape, dtype=np.int64)
    trace = AttackTrace(sign_sum, jitter)
    alpha = {n: (zeta * np.abs(theta[n]) / n_steps).astype(theta[n].dtype) for n in names}
    current = theta.replace(star)
    if on_step is not None:
        on_step(0, current)
    for t in range(n_steps):
        grads = loss_grad(current)
        signs = {n: np.sign(grads[n]).astype(np.int64) for n in names}
        for n in names:
            sign_sum[n] += signs[n]
            star[n] = project_box(star[n] + alpha[n] * signs[n], theta[n], zeta)
        if record_steps:
            trace.steps.append(signs)
        current = theta.replace(star)
        if on_step is not None:
            on_step(t + 1, current)
    return current, trace


def robustness_loss(p_nominal, p_attacked) -> float:
    """Batch-mean KL(p_nominal || p_attacked) with a 1e-12 floor inside the logs."""
    p, q = np.asarray(p_nominal, dtype=np.float64), np.asarray(p_attacked, dtype=np.float64)
    if p.shape != q.shape:
        raise dc.ShapeError(f"robustness_loss: shapes differ, {p.shape} vs {q.shape}")
    p2, q2 = np.atleast_2d(p), np.atleast_2d(q)
    return float(dc.kl_rows_np(p2, q2).mean())


def _value_and_grad(model, params: ParameterSet, names, loss_fn, dtype):
    tape = Tape(dtype)
    p = {n: (tape.var(n, params[n]) if n in names else tape.const(params[n])) for n in params}
    loss = loss_fn(tape, p)
    return float(loss.value), tape.gradient(loss, names)


def kl_grad_fn(model, x, p_nominal, dtype=np.float32):
    """Gradient of KL(p_nominal || f(star, x)) with respect to the susceptible arrays."""

    def grad(star: ParameterSet):
        names = star.names(susceptible_only=True)
        return _value_and_grad(model, star, names, lambda t, p: dc.kl_div(p_nominal, model.forward(t, p, x)), dtype)[1]

    return grad


def ce_grad_fn(model, x, onehot, dtype=np.float32):
    """Gradient of cross-entropy at ``star``; the task-level adversary ascends this."""

    def grad(star: ParameterSet):
        names = star.names(susceptible_only=True)
        return _value_and_grad(
            model, star, names, lambda t, p: dc.cross_entropy(model.forward(t, p, x), onehot), dtype
        )[1]

    return grad


def nominal_probs(model, theta: ParameterSet, x, dtype=np.float32):
    tape = Tape(dtype)
    p = {n: tape.const(theta[n]) for n in theta}
    return model.forward(tape, p, x).value


def pga_attack(
    theta: ParameterSet,
    x,
    model,
    cfg: AttackConfig,
    rng: RngStream,
    dtype=np.float32,
    record_steps: bool = False,
    on_step: Callable | None = None,
) -> tuple[ParameterSet, AttackTrace]:
    """Attack ascending the KL divergence between nominal and attacked outputs.

    The nominal output is computed once and held fixed for every step.
    """
    p_nom = nominal_probs(model, theta, x, dtype)
    return pga(
        theta,
        kl_grad_fn(model, x, p_nom, dtype),
        cfg.zeta_attack,
        cfg.n_steps,
        cfg.eps_init,
        rng,
        record_steps=record_steps,
        on_step=on_step,
    )


def jacobian_diag(theta: ParameterSet, trace: AttackTrace, cfg: AttackConfig) -> dict[str, np.ndarray]:
    """Diagonal of d theta*/d theta: 1 + sign(theta)(zeta + eps R)/N * sign_sum (binary64)."""
    out = {}
    for n, s in trace.sign_sum.items():
        th = theta[n].astype(np.float64)
        coef = np.sign(th) * (cfg.zeta_attack + cfg.eps_init * trace.jitter[n]) / cfg.n_steps
        out[n] = 1.0 + coef * s
    return out


@dataclass
class CombinedResult:
    grads: dict[str, np.ndarray]
    loss_nat: float
    loss_rob: float
    trace: AttackTrace
    jacobian: dict[str, np.ndarray]
    theta_star: ParameterSet


def combined_gradient(
    theta: ParameterSet,
    x,
    onehot,
    model,
    cfg: AttackConfig,
    rng: RngStream,
    dtype=np.float32,
    record_steps: bool = False,
) -> CombinedResult:
    """Gradient of CE(f(theta)) + beta KL(f(theta) || f(theta*)) with theta* = attack(theta).

    The KL term contributes its direct derivative through the nominal
    output plus J^T times its derivative in theta*, with J the diagonal
    Jacobian from :func:`jacobian_diag`.
    """
    star, trace = pga_attack(theta, x, model, cfg, rng, dtype=dtype, record_steps=record_steps)
    names = theta.names(susceptible_only=True)
    tape = Tape(dtype)
    p = {n: tape.var(n, theta[n]) for n in theta}
    q = {n: (tape.var("*" + n, star[n]) if n in names else p[n]) for n in theta}
    probs = model.forward(tape, p, x)
    attacked = model.forward(tape, q, x)
    l_nat = dc.cross_entropy(probs, onehot)
    l_rob = dc.kl_div(probs, attacked)
    loss = l_nat + dc.scale(l_rob, cfg.beta_rob)
    g = tape.gradient(loss, list(theta) + ["*" + n for n in names])
    jac = jacobian_diag(theta, trace, cfg)
    grads = {}
    for n in theta:
        if n in names:
            grads[n] = (g[n] + (jac[n] * g["*" + n]).astype(g[n].dtype)).astype(theta[n].dtype)
        else:
            grads[n] = g[n]
    return CombinedResult(grads, float(l_nat.value), float(l_rob.value), trace, jac, star)
