"""Evaluation protocols: mismatch sweeps, weight-space attacks, loss landscapes, membrane statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adversary import ce_grad_fn, kl_grad_fn, nominal_probs, pga
from .data import Dataset
from .diffcore import RngStream, Tape
from .mismatch import proportional_direction, sample_mismatch
from .models import SRNN, ParameterSet
from .training import accuracy, mean_loss

DEFAULT_ZETAS = (0.0, 0.1, 0.2, 0.3, 0.5, 0.7)


def _require(ds: Dataset):
    if len(ds) == 0:
        raise ValueError("empty test set")


@dataclass
class RobustnessTable:
    rows: list[dict]
    samples: dict[float, list[float]] = field(default_factory=dict)

    def row(self, zeta) -> dict:
        for r in self.rows:
            if r["zeta"] == zeta:
                return r
        raise KeyError(zeta)


def mismatch_eval(
    model,
    checkpoints: list[ParameterSet],
    zetas,
    n_samples: int,
    test: Dataset,
    rng: RngStream,
    dtype=np.float32,
) -> RobustnessTable:
    """Test accuracy of simulated mismatched deployments, aggregated per mismatch level.

    Every (level, checkpoint, sample) cell draws from its own forked stream.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    _require(test)
    rows, samples = [], {}
    for zi, zeta in enumerate(zetas):
        accs = []
        for ci, theta in enumerate(checkpoints):
            for s in range(n_samples):
                mm = sample_mismatch(theta, zeta, rng.fork("mismatch", zi, ci, s))
                accs.append(accuracy(model, mm, test, dtype))
        a = np.array(accs)
        samples[float(zeta)] = accs
        rows.append(
            {
                "zeta": float(zeta),
                "mean": float(a.mean()),
                "std": float(a.std()),
                "min": float(a.min()),
                "max": float(a.max()),
                "n": len(accs),
            }
        )
    return RobustnessTable(rows, samples)


def random_perturbation_eval(model, theta, zetas, test: Dataset, n_samples: int, rng: RngStream, dtype=np.float32):
    """Mean accuracy at theta + v, v from proportional_direction, per zeta."""
    _require(test)
    out = []
    for zi, zeta in enumerate(zetas):
        accs = []
        for s in range(n_samples):
            v = proportional_direction(theta, zeta, rng.fork("random", zi, s))
            moved = theta.replace({n: (theta[n] + v[n]).astype(theta[n].dtype) for n in theta})
            accs.append(accuracy(model, moved, test, dtype))
        out.append(float(np.mean(accs)))
    return out


def _attacked_accuracy(model, theta, test, zeta, n_steps, eps_init, rng, batch_size, dtype, objective):
    correct = 0
    n = len(test)
    bs = batch_size or n
    for bi, start in enumerate(range(0, n, bs)):
        x = test.x[start : start + bs]
        y = test.y[start : start + bs]
        if objective == "ce":
            grad = ce_grad_fn(model, x, np.eye(test.n_classes)[y], dtype)
        else:
            grad = kl_grad_fn(model, x, nominal_probs(model, theta, x, dtype), dtype)
        star, _ = pga(theta, grad, zeta, n_steps, eps_init, rng.fork("batch", bi))
        pred = model.predict(star, x, dtype=dtype).argmax(axis=1)
        correct += int((pred == y).sum())
    return correct / n


def task_pga_eval(
    model,
    theta: ParameterSet,
    zetas,
    test: Dataset,
    n_steps: int = 10,
    eps_init: float = 0.01,
    rng: RngStream | None = None,
    batch_size: int | None = 256,
    dtype=np.float32,
) -> list[float]:
    """Accuracy after PGA on the cross-entropy loss, one attack per evaluation batch."""
    _require(test)
    rng = rng or RngStream(0)
    for z in zetas:
        if z < 0:
            raise ValueError("zeta must be non-negative")
    return [
        _attacked_accuracy(model, theta, test, z, n_steps, eps_init, rng.fork("task", i), batch_size, dtype, "ce")
        for i, z in enumerate(zetas)
    ]


def kl_pga_eval(
    model,
    theta: ParameterSet,
    zetas,
    test: Dataset,
    n_steps: int = 10,
    eps_init: float = 0.01,
    rng: RngStream | None = None,
    batch_size: int | None = 256,
    dtype=np.float32,
) -> list[float]:
    """Accuracy after PGA on KL(nominal || attacked); labels are not used by the attack."""
    _require(test)
    rng = rng or RngStream(0)
    return [
        _attacked_accuracy(model, theta, test, z, n_steps, eps_init, rng.fork("kl", i), batch_size, dtype, "kl")
        for i, z in enumerate(zetas)
    ]


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    losses: np.ndarray  # trials x alphas
    streams: list[int]
    zeta: float
    nominal_loss: float

    @property
    def mean_curve(self) -> np.ndarray:
        return self.losses.mean(axis=0)

    def flatness(self, at: float = 1.0) -> float:
        """Mean over trials of the loss rise at alpha = -at and +at relative to alpha = 0."""
        i0 = int(np.argmin(np.abs(self.alphas)))
        ip = int(np.argmin(np.abs(self.alphas - at)))
        im = int(np.argmin(np.abs(self.alphas + at)))
        rise = 0.5 * (self.losses[:, ip] + self.losses[:, im]) - self.losses[:, i0]
        return float(rise.mean())


def symmetric_alphas(n_alphas: int, span: float = 2.0) -> np.ndarray:
    if n_alphas < 3 or n_alphas % 2 == 0:
        raise ValueError("n_alphas must be odd and at least 3")
    half = np.linspace(0.0, span, n_alphas // 2 + 1)
    return np.concatenate([-half[:0:-1], half])


def loss_along(model, theta: ParameterSet, v: dict, alphas, test: Dataset, dtype=np.float32) -> np.ndarray:
    """Test cross-entropy at theta + alpha v for each alpha."""
    out = np.empty(len(alphas))
    for j, a in enumerate(alphas):
        moved = theta.replace({n: theta[n] + theta[n].dtype.type(a) * v[n] for n in theta})
        out[j] = mean_loss(model, moved, test, dtype)
    return out


def landscape_sweep(
    model,
    theta: ParameterSet,
    test: Dataset,
    zeta: float,
    n_trials: int,
    n_alphas: int,
    rng: RngStream,
    dtype=np.float32,
) -> LandscapeGrid:
    """Test cross-entropy along random directions v ~ N(0, zeta|theta|), alpha in [-2, 2]."""
    _require(test)
    alphas = symmetric_alphas(n_alphas)
    losses = np.empty((n_trials, len(alphas)))
    streams = []
    for t in range(n_trials):
        sub = rng.fork("landscape", t)
        streams.append(sub.stream)
        losses[t] = loss_along(model, theta, proportional_direction(theta, zeta, sub), alphas, test, dtype)
    return LandscapeGrid(alphas, losses, streams, float(zeta), mean_loss(model, theta, test, dtype))


def membrane_histogram(srnn: SRNN, theta: ParameterSet, x, n_bins: int = 60, value_range=(-2.0, 2.0), dtype=np.float64):
    """Histogram of V/B over every step, neuron and example.

    Values outside ``value_range`` are counted in the edge bins. Also returns
    the fraction of values with |V/B - 1| < 0.1.
    """
    if n_bins < 10:
        raise ValueError("n_bins must be at least 10")
    record: dict = {}
    tape = Tape(dtype)
    p = {n: tape.const(theta[n]) for n in theta}
    srnn.logits(tape, p, x, record=record)
    ratio = np.stack(record["V"]) / np.stack(record["B"])
    ratio = ratio.reshape(-1)
    lo, hi = value_range
    counts, edges = np.histogram(np.clip(ratio, lo, hi), bins=n_bins, range=(lo, hi))
    return {
        "edges": edges,
        "counts": counts,
        "total": int(ratio.size),
        "near_threshold_fraction": float(np.mean(np.abs(ratio - 1.0) < 0.1)),
    }
