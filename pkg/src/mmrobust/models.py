"""MLP, small CNN and adaptive-LIF spiking RNN as pure maps (parameters, batch) -> probability rows."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node, RngStream, Tape


@dataclass
class ParameterSet:
    """Named parameter arrays plus the names exposed to mismatch and attack."""

    arrays: dict[str, np.ndarray]
    susceptible: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.arrays:
            self.susceptible.setdefault(name, True)
        extra = set(self.susceptible) - set(self.arrays)
        if extra:
            raise KeyError(f"susceptibility flags for unknown arrays: {sorted(extra)}")

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def names(self, susceptible_only=False) -> list[str]:
        return [n for n in self.arrays if self.susceptible[n] or not susceptible_only]

    def replace(self, arrays: dict) -> "ParameterSet":
        """New set with some arrays swapped out; flags are kept."""
        merged = dict(self.arrays)
        merged.update(arrays)
        return ParameterSet(merged, dict(self.susceptible))

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.arrays.items()}, dict(self.susceptible))

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: v.astype(dtype) for k, v in self.arrays.items()}, dict(self.susceptible))

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def glorot_normal(rng: RngStream, shape, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(shape) * std


@dataclass
class ForwardContext:
    """Training-time options for a forward pass: dropout on hidden units."""

    dropout_p: float = 0.0
    rng: RngStream | None = None
    per_step: bool = True  # SRNN only: fresh mask every time step


def dropout_mask(shape, p: float, rng: RngStream) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``p``, else ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.uniform(shape) > p
    return keep / (1.0 - p)


def _maybe_drop(h: Node, ctx: ForwardContext | None) -> Node:
    if ctx is None or ctx.dropout_p == 0.0:
        return h
    return h * dropout_mask(h.shape, ctx.dropout_p, ctx.rng)


class Model:
    """Shared plumbing; subclasses implement ``init`` and ``logits``."""

    kind = "model"

    def forward(self, tape: Tape, p: dict[str, Node], x, ctx=None, record=None) -> Node:
        return dc.softmax(self.logits(tape, p, x, ctx=ctx, record=record))

    def bind(self, tape: Tape, params: ParameterSet, prefix: str = "") -> dict[str, Node]:
        return {n: tape.var(prefix + n, params[n]) for n in params}

    def predict(self, params: ParameterSet, x, dtype=np.float32, batch_size: int = 512) -> np.ndarray:
        """Probability rows for ``x`` without recording gradients beyond one batch."""
        out = []
        for i in range(0, len(x), batch_size):
            tape = Tape(dtype)
            p = {n: tape.const(params[n]) for n in params}
            out.append(self.forward(tape, p, x[i : i + batch_size]).value)
        return np.concatenate(out, axis=0)

    def predict_logits(self, params: ParameterSet, x, dtype=np.float64, batch_size: int = 512, record=None):
        out = []
        for i in range(0, len(x), batch_size):
            tape = Tape(dtype)
            p = {n: tape.const(params[n]) for n in params}
            out.append(self.logits(tape, p, x[i : i + batch_size], record=record).value)
        return np.concatenate(out, axis=0)

    def describe(self) -> dict:
        """JSON-native architecture descriptor, the inverse of :func:`build_model`."""
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()}
        return {"kind": self.kind, **d}


# -- MLP ------------------------------------------------------------------


@dataclass
class MlpConfig:
    n_in: int = 196
    hidden: tuple = (128,)
    n_classes: int = 10


class MLP(Model):
    kind = "mlp"

    def __init__(self, config: MlpConfig | None = None, **kw):
        self.config = config or MlpConfig(**kw)
        self.config.hidden = tuple(self.config.hidden)

    def widths(self):
        c = self.config
        return [c.n_in, *c.hidden, c.n_classes]

    def init(self, rng: RngStream) -> ParameterSet:
        arrays = {}
        w = self.widths()
        for i, (a, b) in enumerate(zip(w[:-1], w[1:])):
            arrays[f"W{i}"] = glorot_normal(rng.fork("W", i), (a, b), a, b)
            arrays[f"b{i}"] = np.zeros(b)
        return ParameterSet(arrays)

    def logits(self, tape, p, x, ctx=None, record=None):
        x = np.asarray(x).reshape(len(x), -1)
        if x.shape[1] != self.config.n_in:
            raise dc.ShapeError(f"mlp: batch width {x.shape[1]} != input width {self.config.n_in}")
        h = tape.const(x)
        n_layers = len(self.widths()) - 1
        for i in range(n_layers):
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            if record is not None:
                record.setdefault(f"pre{i}", []).append(z.value)
            if i < n_layers - 1:
                h = _maybe_drop(dc.relu(z), ctx)
            else:
                h = z
        return h


def mlp_forward(params: ParameterSet, batch, config: MlpConfig | None = None, dtype=np.float64):
    model = MLP(config) if config else _infer_mlp(params)
    return model.predict(params, batch, dtype=dtype)


def _infer_mlp(params):
    n = len([k for k in params if k.startswith("W")])
    shapes = [params[f"W{i}"].shape for i in range(n)]
    return MLP(MlpConfig(shapes[0][0], tuple(s[1] for s in shapes[:-1]), shapes[-1][1]))


# -- CNN ------------------------------------------------------------------


@dataclass
class CnnConfig:
    image: tuple = (28, 28)
    channels: tuple = (64, 64)
    kernel: int = 4
    dense: tuple = (256, 64)
    n_classes: int = 10


class CNN(Model):
    """Two [conv, max-pool, ReLU] blocks, dense ReLU layers, softmax head.

    Max-pool windows that overhang an odd edge are kept (ceil mode), which
    gives a 5x5x64 = 1600 flatten width for 28x28 inputs with 4x4 kernels.
    """

    kind = "cnn"

    def __init__(self, config: CnnConfig | None = None, **kw):
        self.config = config or CnnConfig(**kw)
        c = self.config
        c.image, c.channels, c.dense = tuple(c.image), tuple(c.channels), tuple(c.dense)

    def feature_shape(self):
        h, w = self.config.image
        k = self.config.kernel
        for _ in self.config.channels:
            h, w = h - k + 1, w - k + 1
            if h < 1 or w < 1:
                raise dc.ShapeError(f"cnn: image {self.config.image} smaller than the receptive field")
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w, self.config.channels[-1]

    def flat_width(self):
        return int(np.prod(self.feature_shape()))

    def init(self, rng: RngStream) -> ParameterSet:
        c = self.config
        arrays, flags = {}, {}
        cin = 1
        for i, cout in enumerate(c.channels):
            k = c.kernel
            arrays[f"conv{i}_k"] = glorot_normal(rng.fork("conv", i), (k, k, cin, cout), k * k * cin, k * k * cout)
            arrays[f"conv{i}_b"] = np.zeros(cout)
            flags[f"conv{i}_b"] = False
            cin = cout
        widths = [self.flat_width(), *c.dense, c.n_classes]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            arrays[f"fc{i}_W"] = glorot_normal(rng.fork("fc", i), (a, b), a, b)
            arrays[f"fc{i}_b"] = np.zeros(b)
        return ParameterSet(arrays, flags)

    def logits(self, tape, p, x, ctx=None, record=None):
        c = self.config
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[..., None]
        if x.ndim == 2:
            x = x.reshape(len(x), *c.image, 1)
        self.feature_shape()
        if x.shape[1:3] != c.image:
            raise dc.ShapeError(f"cnn: image shape {x.shape[1:3]} != configured {c.image}")
        h = tape.const(x)
        for i in range(len(c.channels)):
            z = dc.conv2d(h, p[f"conv{i}_k"]) + p[f"conv{i}_b"]
            pooled = dc.maxpool2(z)
            if record is not None:
                record.setdefault(f"conv{i}", []).append(z.value)
                record.setdefault(f"pool{i}", []).append(pooled.value)
            h = dc.relu(pooled)
        h = dc.reshape(h, (x.shape[0], -1))
        n_fc = len(c.dense) + 1
        for i in range(n_fc):
            z = h @ p[f"fc{i}_W"] + p[f"fc{i}_b"]
            if record is not None:
                record.setdefault(f"fc{i}", []).append(z.value)
            h = _maybe_drop(dc.relu(z), ctx) if i < n_fc - 1 else z
        return h


def cnn_forward(params: ParameterSet, batch, config: CnnConfig | None = None, dtype=np.float64):
    return CNN(config or CnnConfig()).predict(params, batch, dtype=dtype)


# -- spiking RNN ----------------------------------------------------------


@dataclass
class SrnnConfig:
    n_in: int = 2
    hidden: int = 128
    n_classes: int = 4
    # times in milliseconds, so a spike contributes o / dt = 1 to b and the recurrent drive
    dt: float = 1.0
    tau_mem: float = 20.0
    tau_ada: float = 100.0
    beta_ada: float = 1.8
    b0: float = 1.0
    t_refr: float = 2.0
    dampening: float = 0.3
    relaxed_spikes: bool = False  # smooth spike twin, for gradient checks only

    def __post_init__(self):
        for name in ("dt", "tau_mem", "tau_ada", "t_refr", "b0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def paper_scale(cls, **kw):
        """Roughly 65k trainable parameters (64 input channels, 220 neurons, 6 classes)."""
        return cls(**{"n_in": 64, "hidden": 220, "n_classes": 6, **kw})

    @property
    def rho_v(self):
        return math.exp(-self.dt / self.tau_mem)

    @property
    def rho_b(self):
        return math.exp(-self.dt / self.tau_ada)

    @property
    def n_refr(self) -> int:
        # tolerate float noise in t_refr / dt
        return int(math.ceil(self.t_refr / self.dt - 1e-9))


@dataclass
class SrnnState:
    V: np.ndarray
    b: np.ndarray
    refr: np.ndarray
    o: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int):
        z = np.zeros((batch, hidden))
        return cls(z.copy(), z.copy(), np.zeros((batch, hidden), dtype=np.int64), z.copy())


def surrogate_spike_backward(V, B, d):
    """Pseudo-derivative used in place of d o / d V."""
    return dc.surrogate_np(np.asarray(V, dtype=float), np.asarray(B, dtype=float), d)


def _refr_next(n_refr):
    def fn(refr, o):
        return np.where(o > 0, float(n_refr), np.maximum(refr - 1.0, 0.0))

    return fn


def _ready(refr):
    return (refr == 0).astype(refr.dtype)


def _hard(o):
    return (o > 0).astype(o.dtype)


class SRNN(Model):
    """Recurrent population of adaptive leaky integrate-and-fire neurons.

    Input currents are N x T x n_in. The readout is a softmax over the
    time-averaged spike trains.
    """

    kind = "srnn"

    def __init__(self, config: SrnnConfig | None = None, **kw):
        self.config = config or SrnnConfig(**kw)

    def init(self, rng: RngStream) -> ParameterSet:
        c = self.config
        return ParameterSet(
            {
                "W_in": glorot_normal(rng.fork("W_in"), (c.n_in, c.hidden), c.n_in, c.hidden),
                "W_rec": glorot_normal(rng.fork("W_rec"), (c.hidden, c.hidden), c.hidden, c.hidden),
                "W_out": glorot_normal(rng.fork("W_out"), (c.hidden, c.n_classes), c.hidden, c.n_classes),
                "b_out": np.zeros(c.n_classes),
            }
        )

    def step(self, tape, p, state: dict, x_t, ctx=None, mask=None):
        """One update; ``state`` holds nodes V, b, refr. Returns (new state, spikes, threshold)."""
        c = self.config
        V, b, refr = state["V"], state["b"], state["refr"]
        B = dc.scale(b, c.beta_ada) + c.b0
        o = dc.spike(V, B, c.dampening, relaxed=c.relaxed_spikes) * tape.nondiff(_ready, refr)
        fired = tape.nondiff(_hard, o) if c.relaxed_spikes else o
        refr_new = tape.nondiff(_refr_next(c.n_refr), refr, fired)
        b_new = dc.scale(b, c.rho_b) + dc.scale(o, (1.0 - c.rho_b) / c.dt)
        o_out = o if mask is None else o * mask
        drive = tape.const(x_t) @ p["W_in"] + dc.scale(o_out, 1.0 / c.dt) @ p["W_rec"]
        V_new = dc.scale(V, c.rho_v) + dc.scale(drive, 1.0 - c.rho_v) - o * B
        return {"V": V_new, "b": b_new, "refr": refr_new}, o_out, B

    def logits(self, tape, p, x, ctx=None, record=None):
        c = self.config
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[2] != c.n_in:
            raise dc.ShapeError(f"srnn: expected N x T x {c.n_in} input currents, got {x.shape}")
        n, T = x.shape[:2]
        if T < 1:
            raise dc.ShapeError("srnn: need at least one time step")
        zeros = np.zeros((n, c.hidden))
        state = {"V": tape.const(zeros), "b": tape.const(zeros), "refr": tape.const(zeros)}
        drop = ctx is not None and ctx.dropout_p > 0
        mask = None
        if drop and not ctx.per_step:
            mask = tape.const(dropout_mask((n, c.hidden), ctx.dropout_p, ctx.rng))
        z_sum = None
        for t in range(T):
            if drop and ctx.per_step:
                mask = tape.const(dropout_mask((n, c.hidden), ctx.dropout_p, ctx.rng))
            V_t = state["V"]
            state, o, B = self.step(tape, p, state, x[:, t, :], mask=mask)
            if record is not None:
                record.setdefault("V", []).append(V_t.value)
                record.setdefault("B", []).append(B.value)
                record.setdefault("o", []).append(o.value)
            z_sum = o if z_sum is None else z_sum + o
        z_avg = dc.scale(z_sum, 1.0 / T)
        return z_avg @ p["W_out"] + p["b_out"]


def srnn_step(params: ParameterSet, state: SrnnState, input_current, config: SrnnConfig | None = None) -> SrnnState:
    """Advance a concrete state by one time step (binary64)."""
    model = SRNN(config or SrnnConfig(n_in=params["W_in"].shape[0], hidden=params["W_in"].shape[1]))
    tape = Tape(np.float64)
    p = {n: tape.const(params[n]) for n in params}
    st = {
        "V": tape.const(state.V),
        "b": tape.const(state.b),
        "refr": tape.const(np.asarray(state.refr, dtype=float)),
    }
    new, o, _ = model.step(tape, p, st, np.atleast_2d(input_current))
    return SrnnState(new["V"].value, new["b"].value, new["refr"].value.astype(np.int64), o.value)


def srnn_forward(params: ParameterSet, batch, config: SrnnConfig | None = None, dtype=np.float64):
    c = config or SrnnConfig(
        n_in=params["W_in"].shape[0], hidden=params["W_in"].shape[1], n_classes=params["W_out"].shape[1]
    )
    return SRNN(c).predict(params, batch, dtype=dtype)


def build_model(desc: dict) -> Model:
    """Model from a ``describe()`` dictionary."""
    desc = dict(desc)
    kind = desc.pop("kind")
    if kind == "mlp":
        return MLP(MlpConfig(**desc))
    if kind == "cnn":
        return CNN(CnnConfig(**desc))
    if kind == "srnn":
        return SRNN(SrnnConfig(**desc))
    raise ValueError(f"unknown architecture {kind!r}")
