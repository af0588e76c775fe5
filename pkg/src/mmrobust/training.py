"""Adam training loop for the six compared methods, with validation-based checkpoint selection."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .adversary import AttackConfig, ce_grad_fn, combined_gradient, pga
from .data import Dataset
from .diffcore import RngStream, Tape
from .models import ForwardContext, ParameterSet, dropout_mask

log = logging.getLogger(__name__)

METHODS = ("standard", "beta", "beta_forward", "forward_noise", "dropout", "awp")
PRECISIONS = {"binary32": np.float32, "binary64": np.float64}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "standard"
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_size: int = 64
    beta_rob: float = 0.25
    dropout_p: float = 0.3
    dropout_per_step: bool = True
    forward_noise_std: float = 0.3
    awp_gamma: float = 0.1
    grad_clip: float | None = None
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0
    precision: str = "binary32"

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.method not in METHODS:
            raise ValueError(f"unknown training method {self.method!r}; expected one of {METHODS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.forward_noise_std < 0 or self.awp_gamma < 0 or self.beta_rob < 0:
            raise ValueError("forward_noise_std, awp_gamma and beta_rob must be non-negative")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer ------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "OptimizerState":
        return cls(
            {n: np.zeros(params[n].shape) for n in params},
            {n: np.zeros(params[n].shape) for n in params},
        )


def adam_step(state: OptimizerState, params: ParameterSet, grads: dict, lr: float):
    """Bias-corrected Adam update; moments are kept in binary64."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v, new = {}, {}, {}
    for n in params:
        g = np.asarray(grads[n], dtype=np.float64)
        if g.shape != params[n].shape:
            raise dc.ShapeError(f"adam_step: gradient for {n} has shape {g.shape}, parameter {params[n].shape}")
        m[n] = b1 * state.m[n] + (1 - b1) * g
        v[n] = b2 * state.v[n] + (1 - b2) * g * g
        mhat = m[n] / (1 - b1**t)
        vhat = v[n] / (1 - b2**t)
        new[n] = (params[n] - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params[n].dtype)
    return replace(state, m=m, v=v, step=t), params.replace(new)


# -- forward wrappers -----------------------------------------------------


class NoisyForward:
    """Forward pass on theta + sigma |theta| n for a fixed noise draw n.

    The perturbation is built on the tape from the clean parameter nodes, so
    gradients are taken with respect to the clean parameters.
    """

    def __init__(self, model, sigma: float, noise: dict[str, np.ndarray]):
        self.model = model
        self.sigma = sigma
        self.noise = noise

    def forward(self, tape, p, x, ctx=None, record=None):
        noisy = {}
        for n, node in p.items():
            if n in self.noise:
                noisy[n] = node + dc.absolute(node) * (self.sigma * self.noise[n])
            else:
                noisy[n] = node
        return self.model.forward(tape, noisy, x, ctx=ctx, record=record)


class DropoutForward:
    def __init__(self, model, ctx: ForwardContext):
        self.model = model
        self.ctx = ctx

    def forward(self, tape, p, x, ctx=None, record=None):
        return self.model.forward(tape, p, x, ctx=self.ctx, record=record)


def draw_forward_noise(params: ParameterSet, rng: RngStream) -> dict[str, np.ndarray]:
    return {n: rng.normal(params[n].shape) for n in params.names(susceptible_only=True)}


# -- evaluation helpers ---------------------------------------------------


def loss_and_grad(fwd, params: ParameterSet, x, onehot, dtype, wrt=None):
    tape = Tape(dtype)
    names = list(params) if wrt is None else list(wrt)
    p = {n: (tape.var(n, params[n]) if n in names else tape.const(params[n])) for n in params}
    loss = dc.cross_entropy(fwd.forward(tape, p, x), onehot)
    return float(loss.value), tape.gradient(loss, names)


def accuracy(model, params: ParameterSet, ds: Dataset, dtype=np.float32, batch_size: int = 512) -> float:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    probs = model.predict(params, ds.x, dtype=dtype, batch_size=batch_size)
    return float(np.mean(probs.argmax(axis=1) == ds.y))


def mean_loss(model, params: ParameterSet, ds: Dataset, dtype=np.float32, batch_size: int = 512) -> float:
    """Test-set categorical cross-entropy (same floor as the training loss)."""
    probs = model.predict(params, ds.x, dtype=dtype, batch_size=batch_size)
    picked = probs[np.arange(len(ds)), ds.y].astype(np.float64)
    return float(-np.log(np.maximum(picked, dc.ops.LOG_FLOOR)).mean())


def _clip(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm <= max_norm or norm == 0:
        return grads
    s = max_norm / norm
    return {n: (g * s).astype(g.dtype) for n, g in grads.items()}


@dataclass
class BatchStep:
    grads: dict
    loss: float
    n_grad_evals: int
    loss_rob: float | None = None


def batch_gradient(model, params: ParameterSet, x, onehot, cfg: TrainConfig, rng: RngStream) -> BatchStep:
    """Per-batch descent direction for ``cfg.method``."""
    dtype = cfg.dtype
    method = cfg.method
    if method == "standard":
        loss, g = loss_and_grad(model, params, x, onehot, dtype)
        return BatchStep(g, loss, 1)
    if method == "forward_noise":
        fwd = NoisyForward(model, cfg.forward_noise_std, draw_forward_noise(params, rng.fork("noise")))
        loss, g = loss_and_grad(fwd, params, x, onehot, dtype)
        return BatchStep(g, loss, 1)
    if method == "dropout":
        fwd = DropoutForward(model, ForwardContext(cfg.dropout_p, rng.fork("dropout"), cfg.dropout_per_step))
        loss, g = loss_and_grad(fwd, params, x, onehot, dtype)
        return BatchStep(g, loss, 1)
    if method in ("beta", "beta_forward"):
        acfg = replace(cfg.attack, beta_rob=cfg.beta_rob)
        fwd = model
        if method == "beta_forward":
            fwd = NoisyForward(model, cfg.forward_noise_std, draw_forward_noise(params, rng.fork("noise")))
        res = combined_gradient(params, x, onehot, fwd, acfg, rng.fork("attack"), dtype=dtype)
        return BatchStep(res.grads, res.loss_nat, acfg.n_steps + 1, res.loss_rob)
    if method == "awp":
        a = cfg.attack
        star, _ = pga(params, ce_grad_fn(model, x, onehot, dtype), cfg.awp_gamma, a.n_steps, a.eps_init, rng.fork("awp"))
        loss, g = loss_and_grad(model, star, x, onehot, dtype)
        return BatchStep(g, loss, a.n_steps + 1)
    raise ValueError(f"unknown training method {method!r}")


def train(model, datasets: dict[str, Dataset], cfg: TrainConfig, init: ParameterSet | None = None, on_epoch=None):
    """Train for ``cfg.epochs`` full epochs and return the best-validation checkpoint.

    Returns ``(best_params, history)`` where ``history`` holds per-epoch
    records plus the selected epoch. No early stopping.
    """
    for k in ("train", "val"):
        if k not in datasets or len(datasets[k]) == 0:
            raise ValueError(f"split {k!r} is missing or empty")
    dtype = cfg.dtype
    root = RngStream(cfg.seed)
    params = (init or model.init(root.fork("init"))).astype(dtype)
    opt = OptimizerState.zeros_like(params)
    tr = datasets["train"]
    best, best_acc, best_epoch = params.copy(), -1.0, -1
    epochs = []
    grad_evals = 0
    for epoch in range(cfg.epochs):
        order = root.fork("shuffle", epoch).permutation(len(tr))
        losses, rob_losses = [], []
        for bi, start in enumerate(range(0, len(tr), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            step = batch_gradient(model, params, tr.x[idx], tr.onehot(idx), cfg, root.fork("batch", epoch, bi))
            if not np.isfinite(step.loss) or not all(np.all(np.isfinite(g)) for g in step.grads.values()):
                raise TrainingDiverged(
                    f"non-finite loss/gradient at epoch {epoch} batch {bi} (method {cfg.method}, loss {step.loss})"
                )
            grad_evals += step.n_grad_evals
            losses.append(step.loss)
            if step.loss_rob is not None:
                rob_losses.append(step.loss_rob)
            opt, params = adam_step(opt, params, _clip(step.grads, cfg.grad_clip), cfg.learning_rate)
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_acc": accuracy(model, params, datasets["val"], dtype),
        }
        if rob_losses:
            rec["train_loss_rob"] = float(np.mean(rob_losses))
        if "test" in datasets and len(datasets["test"]):
            rec["test_acc"] = accuracy(model, params, datasets["test"], dtype)
        epochs.append(rec)
        log.info("epoch %d %s", epoch, rec)
        if rec["val_acc"] > best_acc:
            best, best_acc, best_epoch = params.copy(), rec["val_acc"], epoch
        if on_epoch is not None:
            on_epoch(rec, params)
    history = {
        "method": cfg.method,
        "epochs": epochs,
        "best_epoch": best_epoch,
        "best_val_acc": best_acc,
        "grad_evals": grad_evals,
    }
    return best, history
