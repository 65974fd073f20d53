"""Reverse-mode differentiation tape over dense float64 arrays.

A program is a callable ``program(tape, *inputs, rng=rng)`` that builds nodes
through the ``Tape`` methods and returns the id of its output node.  Spike
nodes record the realized binary outcome; on the backward pass their local
derivative comes from a :class:`SpikeGradRule` instead of the (a.e. zero)
derivative of the step.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import PreconditionError, ShapeError, UnreachableError
from .surrogate import sigmoid_prime, superspike

FAMILIES = ("sigmoid-derivative", "superspike", "identity-ste", "zero")
SPIKE_OPS = ("heaviside_spike", "bernoulli_spike")


@dataclass(frozen=True)
class SpikeGradRule:
    """How ``d spike / d (u - theta)`` is evaluated on the backward pass."""

    family: str = "sigmoid-derivative"
    beta: float = 10.0
    scale_by_inv_beta: bool = False
    backprop_through_reset: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise PreconditionError(f"unknown surrogate family {self.family!r}; expected one of {FAMILIES}")
        if self.family in ("sigmoid-derivative", "superspike") and not self.beta > 0:
            raise PreconditionError("beta must be positive for sigmoid-derivative and superspike rules")

    def derivative(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.family == "sigmoid-derivative":
            d = sigmoid_prime(x, self.beta)
            return d / self.beta if self.scale_by_inv_beta else d
        if self.family == "superspike":
            return superspike(x, self.beta)
        if self.family == "identity-ste":
            return np.ones_like(x)
        return np.zeros_like(x)

    def to_dict(self):
        return {
            "family": self.family,
            "beta": self.beta,
            "scale_by_inv_beta": self.scale_by_inv_beta,
            "backprop_through_reset": self.backprop_through_reset,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


TRUE_GRADIENT = SpikeGradRule("zero", beta=1.0)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    params: dict = field(default_factory=dict)
    name: str | None = None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def resolve_rule(rule, layer):
    """``rule`` is a single rule or a mapping ``layer -> rule`` (key ``None`` = default)."""
    if rule is None:
        return TRUE_GRADIENT
    if isinstance(rule, SpikeGradRule):
        return rule
    if layer in rule:
        return rule[layer]
    if None in rule:
        return rule[None]
    raise PreconditionError(f"no spike-gradient rule for layer {layer!r}")


class Tape:
    def __init__(self, overrides: Mapping[str, np.ndarray] | None = None):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.aux: dict[int, dict] = {}
        self.adjoints: list[np.ndarray] | None = None
        self.params: dict[str, int] = {}
        self.output: int | None = None
        self._overrides = dict(overrides or {})
        self._program = None
        self._inputs = ()
        self._rng = None

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, value, params=None, name=None):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ShapeError(f"node {op!r} refers to unknown input node {i}")
        self.nodes.append(Node(op, tuple(inputs), params or {}, name))
        self.values.append(value)
        return len(self.nodes) - 1

    def _label(self, i):
        n = self.nodes[i]
        return f"#{i}:{n.op}" + (f"[{n.name}]" if n.name else "") + f"{self.values[i].shape}"

    def value(self, i):
        return self.values[i]

    # leaves -----------------------------------------------------------
    def param(self, value, name):
        if name in self.params:
            raise PreconditionError(f"duplicate parameter name {name!r}")
        value = self._overrides.get(name, value)
        i = self._push("param", (), np.array(value, dtype=np.float64), name=name)
        self.params[name] = i
        return i

    def const(self, value, name=None):
        return self._push("const", (), np.asarray(value, dtype=np.float64), name=name)

    # ops ----------------------------------------------------------------
    def _broadcast(self, ids):
        try:
            return np.broadcast_shapes(*(self.values[i].shape for i in ids))
        except ValueError:
            raise ShapeError("shape mismatch between " + " and ".join(self._label(i) for i in ids)) from None

    def add(self, *ids, name=None):
        self._broadcast(ids)
        out = self.values[ids[0]]
        for i in ids[1:]:
            out = out + self.values[i]
        return self._push("add", ids, out, name=name)

    def mul(self, a, b, name=None):
        self._broadcast((a, b))
        return self._push("mul", (a, b), self.values[a] * self.values[b], name=name)

    def scale(self, a, c, name=None):
        return self._push("scale", (a,), c * self.values[a], {"c": float(c)}, name=name)

    def matmul(self, a, b, transpose_b=False, name=None):
        """``a @ b`` (or ``a @ b.T``); ``a`` may carry leading batch axes."""
        va, vb = self.values[a], self.values[b]
        bb = vb.T if transpose_b else vb
        if bb.ndim != 2 or va.shape[-1] != bb.shape[0]:
            raise ShapeError(f"shape mismatch between {self._label(a)} and {self._label(b)} in matmul")
        return self._push("matmul", (a, b), va @ bb, {"transpose_b": transpose_b}, name=name)

    def sigmoid(self, a, beta=1.0, grad_beta=None, name=None):
        """``sigma_beta(a)``; the backward pass uses ``grad_beta`` (default ``beta``)."""
        out = expit(beta * self.values[a])
        gb = beta if grad_beta is None else grad_beta
        return self._push("sigmoid", (a,), out, {"beta": float(beta), "grad_beta": float(gb)}, name=name)

    def heaviside_spike(self, u, theta=0.0, layer=None, name=None):
        x = self.values[u] - theta
        i = self._push("heaviside_spike", (u,), (x >= 0).astype(np.float64),
                       {"theta": theta, "layer": layer}, name=name)
        self.aux[i] = {"x": x}
        return i

    def bernoulli_spike(self, u, theta, beta, uniforms, layer=None, name=None):
        x = self.values[u] - theta
        uniforms = np.asarray(uniforms, dtype=np.float64)
        if np.broadcast_shapes(uniforms.shape, x.shape) != x.shape:
            raise ShapeError(f"uniform draws of shape {uniforms.shape} do not match {self._label(u)}")
        p = expit(beta * x)
        i = self._push("bernoulli_spike", (u,), (uniforms < p).astype(np.float64),
                       {"theta": theta, "beta": float(beta), "layer": layer}, name=name)
        self.aux[i] = {"x": x, "p": p}
        return i

    def reset_gate(self, x, s, layer=None, name=None):
        """``x * (1 - s)``; the path into ``s`` is cut unless the rule keeps it."""
        self._broadcast((x, s))
        return self._push("reset_gate", (x, s), self.values[x] * (1.0 - self.values[s]),
                          {"layer": layer}, name=name)

    def leak_combine(self, a, b, ca, cb, name=None):
        """``ca * a + cb * b``."""
        self._broadcast((a, b))
        return self._push("leak_combine", (a, b), ca * self.values[a] + cb * self.values[b],
                          {"ca": float(ca), "cb": float(cb)}, name=name)

    def gather(self, a, index, axis=-1, name=None):
        return self._push("gather", (a,), np.take(self.values[a], index, axis=axis),
                          {"index": index, "axis": axis}, name=name)

    def sum(self, a, axis=None, name=None):
        return self._push("sum", (a,), np.sum(self.values[a], axis=axis), {"axis": axis}, name=name)

    # queries ----------------------------------------------------------
    def spike_nodes(self):
        return [i for i, n in enumerate(self.nodes) if n.op in SPIKE_OPS]

    def grad(self, name):
        if self.adjoints is None:
            raise PreconditionError("backward() has not been run on this tape")
        return self.adjoints[self.params[name]]


# backward rules: (tape, node id, adjoint, rule) -> adjoint per input ------------

def _bw_add(t, i, g, rule):
    return [_unbroadcast(g, t.values[j].shape) for j in t.nodes[i].inputs]


def _bw_mul(t, i, g, rule):
    a, b = t.nodes[i].inputs
    return [_unbroadcast(g * t.values[b], t.values[a].shape),
            _unbroadcast(g * t.values[a], t.values[b].shape)]


def _bw_scale(t, i, g, rule):
    return [t.nodes[i].params["c"] * g]


def _bw_matmul(t, i, g, rule):
    a, b = t.nodes[i].inputs
    va, vb = t.values[a], t.values[b]
    tb = t.nodes[i].params["transpose_b"]
    ga = g @ (vb if tb else vb.T)
    a2 = va.reshape(-1, va.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gb = g2.T @ a2 if tb else a2.T @ g2
    return [ga, gb]


def _bw_sigmoid(t, i, g, rule):
    p = t.nodes[i].params
    if p["grad_beta"] == p["beta"]:
        s = t.values[i]
        local = p["beta"] * s * (1.0 - s)
    else:
        local = sigmoid_prime(t.values[t.nodes[i].inputs[0]], p["grad_beta"])
    return [g * local]


def _bw_spike(t, i, g, rule):
    r = resolve_rule(rule, t.nodes[i].params["layer"])
    return [g * r.derivative(t.aux[i]["x"])]


def _bw_reset_gate(t, i, g, rule):
    x, s = t.nodes[i].inputs
    gx = _unbroadcast(g * (1.0 - t.values[s]), t.values[x].shape)
    if resolve_rule(rule, t.nodes[i].params["layer"]).backprop_through_reset:
        return [gx, _unbroadcast(-g * t.values[x], t.values[s].shape)]
    return [gx, None]


def _bw_leak_combine(t, i, g, rule):
    p = t.nodes[i].params
    a, b = t.nodes[i].inputs
    return [_unbroadcast(p["ca"] * g, t.values[a].shape), _unbroadcast(p["cb"] * g, t.values[b].shape)]


def _bw_gather(t, i, g, rule):
    p = t.nodes[i].params
    src = t.values[t.nodes[i].inputs[0]]
    out = np.zeros_like(src)
    idx = [slice(None)] * src.ndim
    idx[p["axis"]] = p["index"]
    np.add.at(out, tuple(idx), g)
    return [out]


def _bw_sum(t, i, g, rule):
    src = t.values[t.nodes[i].inputs[0]]
    axis = t.nodes[i].params["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, src.shape).copy()]


_BACKWARD = {
    "add": _bw_add,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "matmul": _bw_matmul,
    "sigmoid": _bw_sigmoid,
    "heaviside_spike": _bw_spike,
    "bernoulli_spike": _bw_spike,
    "reset_gate": _bw_reset_gate,
    "leak_combine": _bw_leak_combine,
    "gather": _bw_gather,
    "sum": _bw_sum,
}


def forward_record(program, inputs=(), rng=None, overrides=None) -> Tape:
    """Run ``program`` on a fresh tape and keep it replayable."""
    tape = Tape(overrides)
    out = program(tape, *inputs, rng=rng)
    tape.output = out
    tape._program, tape._inputs, tape._rng = program, tuple(inputs), rng
    return tape


def backward(tape: Tape, seed, rule=None):
    """Accumulate adjoints from ``seed`` back to every node.

    ``seed`` is either an array for ``tape.output`` or a mapping
    ``node id -> adjoint`` (used when a loss reads many per-timestep nodes).
    ``rule`` is a :class:`SpikeGradRule` or a mapping ``layer -> rule``.
    Returns the list of adjoints indexed by node id.
    """
    if isinstance(seed, Mapping):
        seeds = seed
    else:
        if tape.output is None:
            raise PreconditionError("tape has no output node; pass a mapping of seeds")
        seeds = {tape.output: seed}
    adj: list = [None] * len(tape.nodes)
    for nid, s in seeds.items():
        s = np.asarray(s, dtype=np.float64)
        if s.shape != tape.values[nid].shape:
            try:
                s = np.broadcast_to(s, tape.values[nid].shape).copy()
            except ValueError:
                raise ShapeError(f"seed of shape {s.shape} does not match {tape._label(nid)}") from None
        adj[nid] = s if adj[nid] is None else adj[nid] + s
    for i in range(len(tape.nodes) - 1, -1, -1):
        g = adj[i]
        node = tape.nodes[i]
        if g is None or not node.inputs:
            continue
        fn = _BACKWARD.get(node.op)
        if fn is None:
            raise UnreachableError(f"no backward rule for op-kind {node.op!r} at node {i}")
        for j, gj in zip(node.inputs, fn(tape, i, g, rule)):
            if gj is None:
                continue
            adj[j] = gj if adj[j] is None else adj[j] + gj
    tape.adjoints = [a if a is not None else np.zeros_like(v) for a, v in zip(adj, tape.values)]
    return tape.adjoints


def param_grads(tape: Tape) -> dict[str, np.ndarray]:
    return {name: tape.adjoints[i] for name, i in tape.params.items()}


def grad_check_differentiable(tape: Tape, h: float = 1e-5) -> float:
    """Max relative error of the tape gradient of ``sum(output)`` against central
    finite differences, over every element of every parameter."""
    if tape.spike_nodes():
        raise PreconditionError("finite-difference check needs a spike-free program")
    if tape._program is None:
        raise PreconditionError("tape was not produced by forward_record")
    backward(tape, np.ones_like(tape.values[tape.output]))
    analytic = param_grads(tape)
    base = {name: tape.values[i].copy() for name, i in tape.params.items()}

    def f(overrides):
        t = forward_record(tape._program, tape._inputs, tape._rng, overrides)
        return float(np.sum(t.values[t.output]))

    worst = 0.0
    for name, value in base.items():
        for idx in np.ndindex(value.shape):
            plus, minus = value.copy(), value.copy()
            plus[idx] += h
            minus[idx] -= h
            fd = (f({**base, name: plus}) - f({**base, name: minus})) / (2 * h)
            err = abs(analytic[name][idx] - fd) / (abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
