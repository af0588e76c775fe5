"""Tape-based reverse-mode differentiation over a fixed set of numpy primitives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class Primitive:
    name: str
    forward: Callable
    backward: Callable | None


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str, backward: Callable | None = None):
    """Register ``fn`` as the forward rule of primitive ``name``.

    ``forward(*values, **attrs) -> (out, aux)``;
    ``backward(g, out, aux, *values, **attrs) -> tuple of input gradients``
    (``None`` entries mean no gradient flows to that input).
    """

    def deco(fn):
        PRIMITIVES[name] = Primitive(name, fn, backward)
        return fn

    return deco


def register_backward(name: str):
    def deco(fn):
        PRIMITIVES[name].backward = fn
        return fn

    return deco


@dataclass
class Record:
    op: str
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    aux: object = None
    requires_grad: bool = False
    name: str | None = None


class Node:
    """Handle to one recorded value on a :class:`Tape`."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        rec = self.tape.records[self.index]
        return f"Node({rec.op}, shape={self.shape})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.apply("scale", self, c=-1.0)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))


class Tape:
    """Ordered record of primitive applications.

    Values are stored at the tape's precision (binary32 or binary64).
    Records are appended in execution order, so operands always precede
    their consumers.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported precision {self.dtype}")
        self.records: list[Record] = []
        self.values: list[np.ndarray] = []
        self.vars: dict[str, int] = {}

    def __len__(self):
        return len(self.records)

    def _push(self, rec: Record, value) -> Node:
        self.records.append(rec)
        self.values.append(value)
        return Node(self, len(self.records) - 1)

    def var(self, name: str, value) -> Node:
        """Differentiable named input."""
        if name in self.vars:
            raise ValueError(f"duplicate tape input {name!r}")
        value = np.array(value, dtype=self.dtype)
        node = self._push(Record("var", requires_grad=True, name=name), value)
        self.vars[name] = node.index
        return node

    def const(self, value) -> Node:
        value = np.asarray(value, dtype=self.dtype)
        return self._push(Record("const"), value)

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        prim = PRIMITIVES[op]
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: operand belongs to a different tape")
        vals = [self.values[x.index] for x in inputs]
        out, aux = prim.forward(*vals, **attrs)
        out = np.asarray(out)
        if out.dtype != self.dtype:
            out = out.astype(self.dtype)
        req = prim.backward is not None and any(self.records[x.index].requires_grad for x in inputs)
        rec = Record(op, tuple(x.index for x in inputs), attrs, aux, req)
        return self._push(rec, out)

    def nondiff(self, fn: Callable, *inputs: Node) -> Node:
        """Apply ``fn`` to input values; no gradient flows through the result."""
        return self.apply("nondiff", *inputs, fn=fn)

    def gradient(self, output: Node, wrt=None) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``output`` with respect to named inputs.

        ``wrt`` defaults to every named input; inputs that do not feed
        ``output`` get zero-filled gradients.
        """
        out_val = self.values[output.index]
        if out_val.size != 1:
            raise ShapeError(f"gradient needs a scalar output, got shape {out_val.shape}")
        names = list(self.vars) if wrt is None else list(wrt)
        for n in names:
            if n not in self.vars:
                raise KeyError(f"unknown tape input {n!r}")
        adj: dict[int, np.ndarray] = {output.index: np.ones_like(out_val)}
        for i in range(output.index, -1, -1):
            g = adj.pop(i, None) if self.records[i].op != "var" else adj.get(i)
            if g is None:
                continue
            rec = self.records[i]
            if rec.op in ("var", "const") or not rec.requires_grad:
                continue
            vals = [self.values[j] for j in rec.inputs]
            grads = PRIMITIVES[rec.op].backward(g, self.values[i], rec.aux, *vals, **rec.attrs)
            for j, gj in zip(rec.inputs, grads):
                if gj is None or not self.records[j].requires_grad:
                    continue
                if j in adj:
                    adj[j] = adj[j] + gj
                else:
                    adj[j] = gj
        result = {}
        for n in names:
            idx = self.vars[n]
            g = adj.get(idx)
            result[n] = np.zeros_like(self.values[idx]) if g is None else np.asarray(g, dtype=self.dtype)
        return result

    def evaluate(self, inputs: dict, outputs: dict[str, Node]) -> dict[str, np.ndarray]:
        """Replay the tape with replacement input values.

        Inputs not given keep their recorded values. Only the records up to
        the last requested output are replayed.
        """
        for n in inputs:
            if n not in self.vars:
                raise KeyError(f"unknown tape input {n!r}")
        last = max(node.index for node in outputs.values())
        vals: list[np.ndarray] = []
        for i in range(last + 1):
            rec = self.records[i]
            if rec.op == "var":
                v = inputs.get(rec.name)
                if v is None:
                    v = self.values[i]
                else:
                    v = np.array(v, dtype=self.dtype)
                    if v.shape != self.values[i].shape:
                        raise ShapeError(
                            f"input {rec.name!r}: expected shape {self.values[i].shape}, got {v.shape}"
                        )
                vals.append(v)
            elif rec.op == "const":
                vals.append(self.values[i])
            else:
                out, _ = PRIMITIVES[rec.op].forward(*(vals[j] for j in rec.inputs), **rec.attrs)
                vals.append(np.asarray(out).astype(self.dtype, copy=False))
        return {k: vals[node.index] for k, node in outputs.items()}


def finite_difference_check(build: Callable[[Tape], Node], params: dict, step: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``build(tape)`` must register every entry of ``params`` with
    ``tape.var`` and return the scalar output. Runs at binary64. The error
    per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tape = Tape(np.float64)
    out = build(tape)
    analytic = tape.gradient(out, list(params))
    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        flat = base.reshape(-1)
        for k in range(flat.size):
            bumped = flat.copy()
            bumped[k] = flat[k] + step
            up = tape.evaluate({name: bumped.reshape(base.shape)}, {"y": out})["y"]
            bumped[k] = flat[k] - step
            dn = tape.evaluate({name: bumped.reshape(base.shape)}, {"y": out})["y"]
            numeric = float(up.reshape(()) - dn.reshape(())) / (2 * step)
            a = float(analytic[name].reshape(-1)[k])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
