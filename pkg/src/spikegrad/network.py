"""Layered SNN rollouts recorded on a tape, and path-wise backpropagation.

Index placement (LIF layers): the spikes ``S[l-1][n]`` of step n drive
``I[l][n+1]``, which drives ``U[l][n+2]``. Row ``n`` of every recorded raster
holds the state after update ``n``, i.e. ``S[n+1]``.

Checkpoint format (JSON, ``format = "spikegrad-checkpoint"``, ``version = 1``)::

    {"format", "version", "T", "dt",
     "layers": [{"W": [[...]], "V": [[...]] | null, "b": [...] | null,
                 "theta": float, "neuron": LifParams dict | null,
                 "noise": {"family", "beta"}}],
     "readout": {"W", "tau_mem", "tau_syn", "dt", "mode"} | null,
     "meta": {...}}

Floats are written with ``repr`` precision so a load/save round-trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, PreconditionError, ShapeError
from .neuron import DETERMINISTIC, EscapeNoise, LifParams
from .rng import CounterRNG, as_counter_rng
from .tape import Tape, backward, param_grads

CHECKPOINT_FORMAT = "spikegrad-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    W: np.ndarray
    V: np.ndarray | None = None
    neuron: LifParams | None = None  # None: memoryless Perceptron
    noise: EscapeNoise = DETERMINISTIC
    b: np.ndarray | None = None
    theta: float = 1.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise ShapeError("W must be [n_out, n_in]")
        if self.V is not None:
            self.V = np.asarray(self.V, dtype=np.float64)
            if self.V.shape != (self.n_out, self.n_out):
                raise ShapeError(f"V must be [{self.n_out}, {self.n_out}], got {self.V.shape}")
        if self.b is not None:
            self.b = np.asarray(self.b, dtype=np.float64)
        if self.neuron is not None:
            self.theta = self.neuron.theta
        if not np.all(np.isfinite(self.W)) or (self.V is not None and not np.all(np.isfinite(self.V))):
            raise NumericError("non-finite weights in layer spec")

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    @property
    def recurrent(self):
        return self.V is not None


@dataclass
class ReadoutSpec:
    """Non-spiking leaky readout; it integrates like a LIF neuron but never resets."""

    W: np.ndarray
    tau_mem: float = 700.0
    tau_syn: float = 10.0
    dt: float = 2.0
    mode: str = "membrane-trace"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.mode != "membrane-trace":
            raise PreconditionError("only the membrane-trace readout is supported; "
                                    "use a spiking LayerSpec as the last layer for spiking output")

    @property
    def lam_mem(self):
        return float(np.exp(-self.dt / self.tau_mem))

    @property
    def lam_syn(self):
        return float(np.exp(-self.dt / self.tau_syn))


@dataclass
class NetworkConfig:
    layers: list[LayerSpec]
    readout: ReadoutSpec | None = None
    T: int = 1
    dt: float = 1.0

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.n_in != a.n_out:
                raise ShapeError(f"layer widths incompatible: {a.n_out} -> {b.n_in}")
        if self.readout is not None and self.readout.W.shape[1] != self.layers[-1].n_out:
            raise ShapeError("readout input width does not match last layer")
        kinds = {layer.neuron is None for layer in self.layers}
        if len(kinds) > 1:
            raise PreconditionError("mixing Perceptron and LIF layers is not supported")

    @property
    def perceptron(self):
        return self.layers[0].neuron is None

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.readout.W.shape[0] if self.readout is not None else self.layers[-1].n_out

    def weights(self) -> dict[str, np.ndarray]:
        out = {}
        for l, layer in enumerate(self.layers):
            out[f"W{l}"] = layer.W
            if layer.V is not None:
                out[f"V{l}"] = layer.V
            if layer.b is not None:
                out[f"b{l}"] = layer.b
        if self.readout is not None:
            out["Wro"] = self.readout.W
        return out

    def with_weights(self, weights: dict[str, np.ndarray]) -> "NetworkConfig":
        layers = []
        for l, layer in enumerate(self.layers):
            layers.append(replace(layer, W=weights.get(f"W{l}", layer.W), V=weights.get(f"V{l}", layer.V),
                                  b=weights.get(f"b{l}", layer.b)))
        readout = self.readout
        if readout is not None and "Wro" in weights:
            readout = replace(readout, W=weights["Wro"])
        return NetworkConfig(layers, readout, self.T, self.dt)

    def with_noise(self, noise) -> "NetworkConfig":
        """Copy with escape noise replaced (one EscapeNoise for all layers, or a list)."""
        if isinstance(noise, EscapeNoise):
            noise = [noise] * len(self.layers)
        layers = [replace(layer, noise=n) for layer, n in zip(self.layers, noise)]
        return NetworkConfig(layers, self.readout, self.T, self.dt)


@dataclass
class RolloutResult:
    output: np.ndarray  # [B, T, n_out]: readout trace or last-layer spikes
    spikes: list[np.ndarray]  # per layer [B, T, n]
    membranes: list[np.ndarray]
    probs: list[np.ndarray]
    tape: Tape | None = None
    output_nodes: list[int] = field(default_factory=list)
    spike_nodes: list[list[int]] = field(default_factory=list)

    @property
    def hidden(self):
        """Spike rasters of the hidden layers (every spiking layer that is not the output)."""
        return self.spikes if self.output is not self.spikes[-1] else self.spikes[:-1]


def _batched_input(x, net):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != net.n_in:
        raise ShapeError(f"input raster must be [T, {net.n_in}] or [B, T, {net.n_in}], got {x.shape}")
    return x


def _uniforms(rng: CounterRNG, layer, row_keys, T, n):
    return np.stack([rng.child(layer, *key).uniform((T, n)) for key in row_keys], axis=0)


def _check_finite(value, layer, step):
    if not np.all(np.isfinite(value)):
        idx = tuple(int(k) for k in np.argwhere(~np.isfinite(value))[0])
        raise NumericError(f"non-finite state in layer {layer} at step {step}, index {idx}",
                           index=idx, step=step, where=layer)


def rollout(net: NetworkConfig, inputs, rng=None, record=True, row_keys=None) -> RolloutResult:
    """Simulate ``net`` on an input raster and record the realized path on a tape.

    ``inputs`` is ``[T, n_in]`` or ``[B, T, n_in]``; a single raster may be
    broadcast over ``B = len(row_keys)`` trials. Bernoulli draws for batch row
    ``r`` of layer ``l`` come from ``rng.child(l, *row_keys[r])``.
    """
    x = _batched_input(inputs, net)
    T = x.shape[1]
    if row_keys is None:
        row_keys = [(r,) for r in range(x.shape[0])]
    row_keys = [tuple(k) if isinstance(k, (tuple, list)) else (k,) for k in row_keys]
    B = len(row_keys)
    if x.shape[0] == 1 and B > 1:
        x = np.broadcast_to(x, (B,) + x.shape[1:])
    elif x.shape[0] != B:
        raise ShapeError(f"{x.shape[0]} input rows for {B} row keys")
    rng = as_counter_rng(rng)
    tape = Tape()
    pid = {name: tape.param(w, name) for name, w in net.weights().items()}
    draws = [_uniforms(rng, l, row_keys, T, layer.n_out) if layer.noise.stochastic else None
             for l, layer in enumerate(net.layers)]

    def spike(l, layer, u, n):
        if layer.noise.stochastic:
            return tape.bernoulli_spike(u, layer.theta, layer.noise.beta, draws[l][:, n], layer=l)
        return tape.heaviside_spike(u, layer.theta, layer=l)

    L = len(net.layers)
    spike_nodes = [[] for _ in range(L)]
    mem_nodes = [[] for _ in range(L)]
    output_nodes = []

    if net.perceptron:
        for n in range(T):
            s = tape.const(x[:, n])
            for l, layer in enumerate(net.layers):
                u = tape.matmul(s, pid[f"W{l}"], transpose_b=True)
                if layer.b is not None:
                    u = tape.add(u, pid[f"b{l}"])
                _check_finite(tape.values[u], l, n)
                s = spike(l, layer, u, n)
                mem_nodes[l].append(u)
                spike_nodes[l].append(s)
            if net.readout is not None:
                output_nodes.append(tape.matmul(s, pid["Wro"], transpose_b=True))
    else:
        zeros = [tape.const(np.zeros((B, layer.n_out))) for layer in net.layers]
        I, U, S = list(zeros), list(zeros), list(zeros)
        if net.readout is not None:
            ro = net.readout
            ro_zero = tape.const(np.zeros((B, ro.W.shape[0])))
            I_ro, U_ro = ro_zero, ro_zero
        for n in range(T):
            s_in = tape.const(x[:, n])
            new_I, new_U, new_S = [], [], []
            for l, layer in enumerate(net.layers):
                p = layer.neuron
                src = s_in if l == 0 else S[l - 1]
                drive = tape.matmul(src, pid[f"W{l}"], transpose_b=True)
                if layer.recurrent:
                    drive = tape.add(drive, tape.matmul(S[l], pid[f"V{l}"], transpose_b=True))
                lm = p.lam_mem
                i_next = tape.leak_combine(I[l], drive, p.lam_syn, 1.0)
                if p.reset_mode == "next-step":
                    u_next = tape.reset_gate(tape.leak_combine(U[l], I[l], lm, 1.0 - lm), S[l], layer=l)
                else:
                    u_next = tape.leak_combine(tape.reset_gate(U[l], S[l], layer=l), I[l], lm, 1.0 - lm)
                _check_finite(tape.values[u_next], l, n)
                new_I.append(i_next)
                new_U.append(u_next)
                new_S.append(spike(l, layer, u_next, n))
            if net.readout is not None:
                i_ro = tape.leak_combine(I_ro, tape.matmul(S[-1], pid["Wro"], transpose_b=True), ro.lam_syn, 1.0)
                U_ro = tape.leak_combine(U_ro, I_ro, ro.lam_mem, 1.0 - ro.lam_mem)
                I_ro = i_ro
                _check_finite(tape.values[U_ro], "readout", n)
                output_nodes.append(U_ro)
            I, U, S = new_I, new_U, new_S
            for l in range(L):
                spike_nodes[l].append(S[l])
                mem_nodes[l].append(U[l])

    def stack(ids):
        return np.stack([tape.values[i] for i in ids], axis=1)

    spikes = [stack(ids) for ids in spike_nodes]
    membranes = [stack(ids) for ids in mem_nodes]
    probs = []
    for l, layer in enumerate(net.layers):
        if layer.noise.stochastic:
            probs.append(np.stack([tape.aux[i]["p"] for i in spike_nodes[l]], axis=1))
        else:
            probs.append(spikes[l])
    if net.readout is not None:
        output = stack(output_nodes)
    else:
        output = spikes[-1]
        output_nodes = spike_nodes[-1]
    return RolloutResult(output, spikes, membranes, probs, tape if record else None, output_nodes, spike_nodes)


def output_seeds(result: RolloutResult, d_output) -> dict[int, np.ndarray]:
    """Seed map from ``dL/d output`` of shape ``[B, T, n_out]``."""
    return {nid: d_output[:, n] for n, nid in enumerate(result.output_nodes)}


def spike_seeds(result: RolloutResult, layer, d_spikes) -> dict[int, np.ndarray]:
    return {nid: d_spikes[:, n] for n, nid in enumerate(result.spike_nodes[layer])}


def merge_seeds(*maps):
    out = {}
    for m in maps:
        for k, v in m.items():
            out[k] = out[k] + v if k in out else v
    return out


def backprop_path(result: RolloutResult, seeds, rule) -> dict[str, np.ndarray]:
    """Gradient per weight along the recorded path, spikes held at their realized values."""
    if result.tape is None:
        raise PreconditionError("rollout was run with record=False")
    if not isinstance(seeds, dict):
        seeds = output_seeds(result, np.asarray(seeds, dtype=np.float64))
    backward(result.tape, seeds, rule)
    return param_grads(result.tape)


def _default_loss(output):
    return float(output.sum()), np.ones_like(output)


def per_trial_gradients(net, inputs, rule, n_trials, rng, loss=_default_loss):
    out = []
    for k in range(n_trials):
        res = rollout(net, inputs, rng, row_keys=[(k,)])
        _, d = loss(res.output)
        out.append(backprop_path(res, d, rule))
    return out


def multi_trial_gradient(net, inputs, rule, n_trials, rng, loss=_default_loss):
    """Mean of path-wise gradients over ``n_trials`` independently sampled paths.

    Trial ``k`` uses the same noise stream as ``per_trial_gradients`` so the
    batched mean equals the mean of single-trial gradients.
    """
    if n_trials < 1:
        raise PreconditionError("n_trials must be >= 1")
    res = rollout(net, inputs, rng, row_keys=[(k,) for k in range(n_trials)])
    _, d = loss(res.output)
    return backprop_path(res, d / n_trials, rule)


# checkpoints ---------------------------------------------------------------

def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def checkpoint_dict(net: NetworkConfig, meta=None) -> dict:
    layers = []
    for layer in net.layers:
        layers.append({
            "W": _arr(layer.W), "V": _arr(layer.V), "b": _arr(layer.b), "theta": layer.theta,
            "neuron": layer.neuron.to_dict() if layer.neuron else None, "noise": layer.noise.to_dict(),
        })
    ro = None
    if net.readout is not None:
        r = net.readout
        ro = {"W": _arr(r.W), "tau_mem": r.tau_mem, "tau_syn": r.tau_syn, "dt": r.dt, "mode": r.mode}
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "T": net.T, "dt": net.dt,
            "layers": layers, "readout": ro, "meta": meta or {}}


def save_checkpoint(net: NetworkConfig, path, meta=None):
    Path(path).write_text(json.dumps(checkpoint_dict(net, meta), sort_keys=True))


def load_checkpoint(path) -> NetworkConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint {path} is not valid JSON: {e}") from None
    if d.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a spikegrad checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {d.get('version')}")
    layers = []
    for ld in d["layers"]:
        layers.append(LayerSpec(
            W=np.array(ld["W"]), V=None if ld["V"] is None else np.array(ld["V"]),
            neuron=LifParams(**ld["neuron"]) if ld["neuron"] else None,
            noise=EscapeNoise(**ld["noise"]), b=None if ld["b"] is None else np.array(ld["b"]),
            theta=ld["theta"]))
    ro = None
    if d["readout"] is not None:
        r = d["readout"]
        ro = ReadoutSpec(np.array(r["W"]), r["tau_mem"], r["tau_syn"], r["dt"], r["mode"])
    return NetworkConfig(layers, ro, d["T"], d["dt"])
