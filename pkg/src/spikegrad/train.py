"""Losses, activity regularizer, SMORMS3, fluctuation-driven initialization and
the matching / classification training loops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter
from scipy.special import log_softmax, softmax

from .analysis import alpha_kernel, fano_factor, van_rossum
from .data import poisson_raster
from .errors import CalibrationError, PreconditionError, ShapeError, UndefinedFanoError
from .network import (LayerSpec, NetworkConfig, ReadoutSpec, backprop_path, merge_seeds,
                      output_seeds, rollout, spike_seeds)
from .neuron import DETERMINISTIC, EscapeNoise, LifParams
from .rng import as_counter_rng
from .tape import SpikeGradRule


# losses --------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    kind: str = "l2-spikes"
    tau_mem: float = 10.0
    tau_syn: float = 5.0

    def __post_init__(self):
        if self.kind not in ("l2-spikes", "van-rossum", "max-over-time-ce"):
            raise PreconditionError(f"unknown loss kind {self.kind!r}")


def l2_spike_loss(output, target):
    """``(1/N) sum_i sum_n (S - S_hat)^2`` with N the number of neurons.

    Batched ``[B, T, N]`` output is averaged over B. Returns ``(loss, dL/dS)``.
    """
    S = np.asarray(output, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if S.shape[-2:] != tgt.shape[-2:]:
        raise ShapeError(f"output {S.shape} and target {tgt.shape} differ")
    diff = S - tgt
    N = S.shape[-1]
    B = S.shape[0] if S.ndim == 3 else 1
    return float(np.sum(diff ** 2) / (N * B)), 2.0 * diff / (N * B)


def van_rossum_loss(output, target, tau_mem=10.0, tau_syn=5.0, dt=1.0):
    """Batch-mean van Rossum distance with its gradient w.r.t. the output raster."""
    S = np.asarray(output, dtype=np.float64)
    if S.ndim == 2:
        S = S[None]
    B, T, N = S.shape
    k = alpha_kernel(tau_mem, tau_syn, dt)
    diff = np.concatenate([S - np.asarray(target, dtype=np.float64), np.zeros((B, k.size - 1, N))], axis=1)
    filt = lfilter(k, [1.0], diff, axis=1)
    # adjoint of the causal filter is the time-reversed filter
    grad = lfilter(k, [1.0], filt[:, ::-1], axis=1)[:, ::-1][:, :T] * dt / B
    return float(0.5 * np.sum(filt ** 2) * dt / B), grad


def max_over_time_ce(trace, labels):
    """Cross-entropy of a softmax over per-class maxima of ``trace [B, T, C]``.

    The subgradient of the max goes to the first maximal timestep.
    Returns ``(mean loss, dL/dtrace, predictions)``.
    """
    U = np.asarray(trace, dtype=np.float64)
    if U.ndim == 2:
        U = U[None]
    labels = np.atleast_1d(labels)
    B, T, C = U.shape
    if C < 2:
        raise PreconditionError("need at least two classes")
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= C:
        raise ShapeError(f"labels must be {B} class indices in [0, {C})")
    idx = np.argmax(U, axis=1)  # first maximal index
    a = np.take_along_axis(U, idx[:, None, :], axis=1)[:, 0]
    logp = log_softmax(a, axis=1)
    loss = -float(np.mean(logp[np.arange(B), labels]))
    da = softmax(a, axis=1)
    da[np.arange(B), labels] -= 1.0
    grad = np.zeros_like(U)
    np.put_along_axis(grad, idx[:, None, :], (da / B)[:, None, :], axis=1)
    return loss, grad, np.argmax(a, axis=1)


@dataclass(frozen=True)
class RegularizerSpec:
    theta_upper: float = 7.0
    lam_upper: float = 0.01

    def __post_init__(self):
        if not self.theta_upper > 0 or self.lam_upper < 0:
            raise PreconditionError("theta_upper must be > 0 and lam_upper >= 0")


def activity_regularizer(hidden, spec: RegularizerSpec):
    """``lam * sum_l sum_k relu(mean_i count_ik - theta)^2`` as an additive penalty.

    ``hidden`` is a list of ``[B, T, n]`` rasters. Returns ``(penalty, [dP/dS per layer])``.
    """
    total = 0.0
    grads = []
    for S in hidden:
        S = np.asarray(S, dtype=np.float64)
        if S.ndim == 2:
            S = S[None]
        excess = np.maximum(S.sum(axis=1).mean(axis=1) - spec.theta_upper, 0.0)  # [B]
        total += spec.lam_upper * float(np.sum(excess ** 2))
        g = 2.0 * spec.lam_upper * excess / S.shape[2]
        grads.append(np.broadcast_to(g[:, None, None], S.shape).copy())
    return total, grads


# SMORMS3 -------------------------------------------------------------------

@dataclass
class Smorms3State:
    lr: float = 0.01
    eps: float = 1e-16
    g: dict = field(default_factory=dict)
    g2: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    m_rule: str = "reference"

    def init(self, params):
        for k, v in params.items():
            self.g[k] = np.zeros_like(v)
            self.g2[k] = np.zeros_like(v)
            self.m[k] = np.ones_like(v)
        return self


def smorms3_step(state: Smorms3State, grads):
    """One SMORMS3 update; returns ``(state, deltas)`` with ``theta += delta``.

    ``m_rule='reference'`` uses ``m = 1 + m (1 - g^2 / (g2 + eps))`` as in the
    original optimizer; ``'literal'`` uses ``1 + m (1 - g^2) / (g2 + eps)``.
    """
    eps = state.eps
    deltas = {}
    for k, grad in grads.items():
        if k not in state.g:
            state.init({k: grad})
        m = state.m[k]
        r = 1.0 / (m + 1.0)
        g = (1.0 - r) * state.g[k] + r * grad
        g2 = (1.0 - r) * state.g2[k] + r * grad ** 2
        x = g * g / (g2 + eps)
        if state.m_rule == "literal":
            state.m[k] = 1.0 + m * (1.0 - g * g) / (g2 + eps)
        else:
            state.m[k] = 1.0 + m * (1.0 - x)
        state.g[k], state.g2[k] = g, g2
        deltas[k] = -np.minimum(state.lr, x) / (np.sqrt(g2) + eps) * grad
    return state, deltas


# initialization ------------------------------------------------------------

def _free_membrane(drive, lam_syn, lam_mem):
    """Membrane without threshold or reset: ``I[n+1] = ls I + d[n]``, ``U[n+1] = lm U + (1-lm) I[n]``."""
    I = lfilter([0.0, 1.0], [1.0, -lam_syn], drive, axis=-2)
    return lfilter([0.0, 1.0 - lam_mem], [1.0, -lam_mem], I, axis=-2)


def free_membrane_std(drive, lam_syn, lam_mem):
    U = _free_membrane(drive, lam_syn, lam_mem)
    burn = U.shape[-2] // 5
    return float(U[..., burn:, :].std())


def fluctuation_init(net: NetworkConfig, sigma_u=1.0, rate=50.0, rng=0, calib_input=None,
                     alpha=0.9, n_rounds=5, tol=0.2):
    """Zero-mean Gaussian weights scaled layer by layer so the free membrane
    potential (no threshold, no reset) fluctuates with std ``sigma_u``.

    Layer ``l`` is calibrated on the spikes of the already-initialized layers
    below it, driven by Poisson input at ``rate`` Hz (or ``calib_input``). With
    recurrence, a share ``alpha`` of the variance comes from the feedforward
    weights. Returns ``(net, measured std per layer)``.
    """
    if net.perceptron:
        raise PreconditionError("fluctuation_init applies to LIF networks")
    rng = as_counter_rng(rng)
    if calib_input is None:
        if not rate > 0:
            raise PreconditionError("input rate must be positive")
        calib_input = poisson_raster(net.n_in, net.T, rate, net.dt, rng.child(10))
    x = np.asarray(calib_input, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if not x.any():
        raise PreconditionError("calibration input is silent")
    layers = list(net.layers)
    measured = []
    src = x
    for l, layer in enumerate(layers):
        p = layer.neuron
        W = rng.child(11, l).normal(layer.W.shape)
        V = rng.child(12, l).normal(layer.V.shape) if layer.recurrent else None
        share = alpha if layer.recurrent else 1.0
        std = None
        for _ in range(n_rounds):
            u_ff = free_membrane_std(src @ W.T, p.lam_syn, p.lam_mem)
            if u_ff == 0:
                raise CalibrationError(f"layer {l} receives no input during calibration")
            W = W * math.sqrt(share) * sigma_u / u_ff
            layers[l] = replace(layer, W=W, V=V)
            sub = NetworkConfig(layers[:l + 1], None, net.T, net.dt)
            spikes = rollout(sub, x, rng.child(13, l)).spikes[l]
            drive = src @ W.T
            if layer.recurrent:
                u_rec = free_membrane_std(spikes @ V.T, p.lam_syn, p.lam_mem)
                if u_rec > 0:
                    V = V * math.sqrt(1.0 - share) * sigma_u / u_rec
                layers[l] = replace(layer, W=W, V=V)
                drive = drive + spikes @ V.T
            std = free_membrane_std(drive, p.lam_syn, p.lam_mem)
            if abs(std - sigma_u) <= tol * sigma_u:
                break
        else:
            raise CalibrationError(f"layer {l}: membrane std {std:.3g} not within {tol:.0%} of {sigma_u}")
        measured.append(std)
        sub = NetworkConfig(layers[:l + 1], None, net.T, net.dt)
        src = rollout(sub, x, rng.child(14, l)).spikes[l]
    readout = net.readout
    if readout is not None:
        W = rng.child(11, len(layers)).normal(readout.W.shape)
        u = free_membrane_std(src @ W.T, readout.lam_syn, readout.lam_mem)
        if u == 0:
            raise CalibrationError("readout receives no input during calibration")
        readout = replace(readout, W=W * sigma_u / u)
        measured.append(free_membrane_std(src @ readout.W.T, readout.lam_syn, readout.lam_mem))
    return NetworkConfig(layers, readout, net.T, net.dt), measured


# training loops ------------------------------------------------------------

def _safe_fano(raster, window=None):
    try:
        return fano_factor(raster, window)
    except UndefinedFanoError:
        return float("nan")


def _layer_lr(lr, name, n_layers, has_readout):
    if not isinstance(lr, dict):
        return lr
    if name == "Wro":
        return lr.get("out", lr.get("Wro", 0.0))
    l = int(name[1:])
    is_out = (l == n_layers - 1) and not has_readout
    return lr.get("out" if is_out else "hid", lr.get(name, 0.0))


@dataclass
class TrainResult:
    net: NetworkConfig
    history: list[dict]
    aborted: bool = False

    def column(self, key):
        return np.array([row[key] for row in self.history])


def apply_update(net: NetworkConfig, deltas) -> NetworkConfig:
    w = net.weights()
    return net.with_weights({k: w[k] + deltas[k] for k in deltas})


def train_matching(net: NetworkConfig, inputs, target, epochs, rule, lr, n_trials=1, rng=0,
                   loss=LossSpec(), optimizer="plain-gd", fano_window=None):
    """Batch gradient descent on one (input, target) pair.

    Each epoch samples ``n_trials`` paths, averages their path-wise gradients
    and takes one step. History rows are measured on the pre-update rollout.
    """
    rng = as_counter_rng(rng)
    target = np.asarray(target, dtype=np.float64)
    history = []
    opt = Smorms3State(lr=lr if not isinstance(lr, dict) else 0.01).init(net.weights()) \
        if optimizer == "smorms3" else None
    for epoch in range(epochs):
        res = rollout(net, inputs, rng, row_keys=[(epoch, k) for k in range(n_trials)])
        l2, d_l2 = l2_spike_loss(res.output, target)
        vr = float(np.mean([van_rossum(o, target, loss.tau_mem, loss.tau_syn, net.dt) for o in res.output]))
        row = {"epoch": epoch, "loss": l2, "vr": vr}
        for l, S in enumerate(res.spikes):
            row[f"fano{l}"] = _safe_fano(S, fano_window)
            row[f"rate{l}"] = float(S.mean())
        history.append(row)
        if not np.isfinite(l2):
            return TrainResult(net, history, aborted=True)
        if loss.kind == "van-rossum":
            _, d = van_rossum_loss(res.output, target, loss.tau_mem, loss.tau_syn, net.dt)
        else:
            d = d_l2
        grads = backprop_path(res, d, rule)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            return TrainResult(net, history, aborted=True)
        if opt is not None:
            _, deltas = smorms3_step(opt, grads)
        else:
            L = len(net.layers)
            deltas = {k: -_layer_lr(lr, k, L, net.readout is not None) * g for k, g in grads.items()}
        net = apply_update(net, deltas)
    return TrainResult(net, history)


def matching_eval(net: NetworkConfig, inputs, target, rng, n_trials=1, key=0, fano_window=None):
    """Trial-averaged L2 and van Rossum loss plus per-layer Fano factors on fresh draws."""
    res = rollout(net, inputs, rng, record=False, row_keys=[(key, k) for k in range(n_trials)])
    target = np.asarray(target, dtype=np.float64)
    out = {"loss": l2_spike_loss(res.output, target)[0],
           "vr": float(np.mean([van_rossum(o, target, 10.0, 5.0, net.dt) for o in res.output]))}
    for l, S in enumerate(res.spikes):
        out[f"fano{l}"] = _safe_fano(S, fano_window)
        out[f"rate{l}"] = float(S.mean())
    return out


def evaluate(net: NetworkConfig, x, y, rng, key=0, noise=None, n_trials=1):
    """Max-over-time accuracy and mean CE; ``noise`` swaps the escape noise first."""
    if noise is not None:
        net = net.with_noise(noise)
    accs, losses = [], []
    for k in range(n_trials):
        res = rollout(net, x, rng, row_keys=[(key, k, i) for i in range(len(y))])
        loss, _, pred = max_over_time_ce(res.output, y)
        accs.append(float(np.mean(pred == y)))
        losses.append(loss)
    return float(np.mean(accs)), float(np.mean(losses))


def train_classify(net: NetworkConfig, train_set, val_set, epochs, rule, lr=0.01, batch_size=32, rng=0,
                   reg=RegularizerSpec(), fano_window=10, eval_every=1):
    """Minibatch SMORMS3 on max-over-time cross-entropy plus the activity penalty.

    Training and validation accuracy come from clean evaluation passes (the
    net's own noise, fresh draws) at the end of every ``eval_every`` epochs.
    """
    rng = as_counter_rng(rng)
    opt = Smorms3State(lr=lr).init(net.weights())
    history = []
    M = len(train_set)
    for epoch in range(epochs):
        order = rng.child(20, epoch).generator().permutation(M)
        losses, fanos = [], []
        for bi, start in enumerate(range(0, M, batch_size)):
            idx = order[start:start + batch_size]
            res = rollout(net, train_set.x[idx], rng, row_keys=[(epoch, int(i)) for i in idx])
            ce, d_out, _ = max_over_time_ce(res.output, train_set.y[idx])
            pen, d_hid = activity_regularizer(res.spikes, reg)
            B = len(idx)
            seeds = merge_seeds(output_seeds(res, d_out),
                                *[spike_seeds(res, l, g / B) for l, g in enumerate(d_hid)])
            grads = backprop_path(res, seeds, rule)
            total = ce + pen / B
            losses.append(total)
            if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                history.append({"epoch": epoch, "loss": total})
                return TrainResult(net, history, aborted=True)
            _, deltas = smorms3_step(opt, grads)
            net = apply_update(net, deltas)
            if bi == 0:
                fanos = [_safe_fano(S, fano_window) for S in res.spikes]
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        for l, f in enumerate(fanos):
            row[f"fano{l}"] = f
        if (epoch + 1) % eval_every == 0 or epoch == epochs - 1:
            row["train_acc"], _ = evaluate(net, train_set.x, train_set.y, rng.child(21), key=epoch)
            row["val_acc"], row["val_loss"] = evaluate(net, val_set.x, val_set.y, rng.child(22), key=epoch) \
                if len(val_set) else (float("nan"), float("nan"))
        history.append(row)
    return TrainResult(net, history)


def cross_evaluation(nets: dict, x, y, noises: dict, rng, n_trials=3):
    """Accuracy of every trained net under every evaluation noise model."""
    return {train_name: {eval_name: evaluate(n, x, y, as_counter_rng(rng).child(23), noise=noise,
                                             n_trials=n_trials)[0]
                         for eval_name, noise in noises.items()}
            for train_name, n in nets.items()}


DETERMINISTIC_EVAL = EscapeNoise("none")


# experiment setups -----------------------------------------------------------

def matching_network(stochastic, n_in=200, n_hidden=200, n_out=200, T=198, dt=1.0, tau_mem=10.0,
                     tau_syn=5.0, beta_hid=10.0, beta_out=100.0):
    """Feed-forward LIF net for spike-train matching, weights zero until initialized.

    Same-step reset lets a neuron fire in adjacent steps; the last spiking layer
    is the output.
    """
    p = LifParams(tau_mem, tau_syn, dt, 1.0, 0.0, "same-step")
    if stochastic:
        noise = [EscapeNoise("sigmoid", beta_hid), EscapeNoise("sigmoid", beta_out)]
    else:
        noise = [DETERMINISTIC, DETERMINISTIC]
    layers = [LayerSpec(np.zeros((n_hidden, n_in)), neuron=p, noise=noise[0]),
              LayerSpec(np.zeros((n_out, n_hidden)), neuron=p, noise=noise[1])]
    return NetworkConfig(layers, None, T, dt)


def matching_rule(stochastic, beta=10.0):
    """Sigmoid-derivative surrogate for the stochastic net, SuperSpike for the deterministic one."""
    return SpikeGradRule("sigmoid-derivative" if stochastic else "superspike", beta)


def classification_network(stochastic, n_in=40, hidden=(16, 32, 64), n_classes=4, T=50, dt=2.0, tau_mem=20.0,
                           tau_syn=10.0, tau_ro=700.0, beta=10.0, recurrent=True):
    """Recurrent LIF layers (next-step reset) feeding a leaky non-spiking readout."""
    p = LifParams(tau_mem, tau_syn, dt, 1.0, 0.0, "next-step")
    noise = EscapeNoise("sigmoid", beta) if stochastic else DETERMINISTIC
    layers, width = [], n_in
    for n in hidden:
        layers.append(LayerSpec(np.zeros((n, width)), np.zeros((n, n)) if recurrent else None,
                                neuron=p, noise=noise))
        width = n
    readout = ReadoutSpec(np.zeros((n_classes, width)), tau_ro, tau_syn, dt)
    return NetworkConfig(layers, readout, T, dt)
