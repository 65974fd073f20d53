"""Discrete-time Perceptron and LIF neurons with deterministic or escape-noise firing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .errors import NumericError, PreconditionError, ShapeError

RESET_MODES = ("next-step", "same-step")


@dataclass(frozen=True)
class LifParams:
    tau_mem: float = 10.0
    tau_syn: float = 5.0
    dt: float = 1.0
    theta: float = 1.0
    u_rest: float = 0.0
    reset_mode: str = "next-step"

    def __post_init__(self):
        if not (self.tau_mem > 0 and self.tau_syn > 0 and self.dt > 0):
            raise PreconditionError("tau_mem, tau_syn and dt must be positive")
        if self.reset_mode not in RESET_MODES:
            raise PreconditionError(f"reset_mode must be one of {RESET_MODES}")

    @property
    def lam_mem(self) -> float:
        return math.exp(-self.dt / self.tau_mem)

    @property
    def lam_syn(self) -> float:
        return math.exp(-self.dt / self.tau_syn)

    def to_dict(self):
        return {k: getattr(self, k) for k in ("tau_mem", "tau_syn", "dt", "theta", "u_rest", "reset_mode")}


@dataclass(frozen=True)
class EscapeNoise:
    """``family='sigmoid'`` fires with ``p = sigma_beta(u - theta)``; ``'none'`` is Heaviside."""

    family: str = "none"
    beta: float = 10.0

    def __post_init__(self):
        if self.family not in ("sigmoid", "none"):
            raise PreconditionError(f"unknown escape-noise family {self.family!r}")
        if not self.beta > 0:
            raise PreconditionError("escape-noise beta must be positive")

    @property
    def stochastic(self) -> bool:
        return self.family == "sigmoid"

    def to_dict(self):
        return {"family": self.family, "beta": self.beta}


DETERMINISTIC = EscapeNoise("none")


@dataclass
class LifState:
    I: np.ndarray
    U: np.ndarray
    S_prev: np.ndarray = field(default=None)

    @classmethod
    def initial(cls, n, params: LifParams, batch=()):
        shape = tuple(batch) + (n,)
        return cls(np.zeros(shape), np.full(shape, float(params.u_rest)), np.zeros(shape))


def heaviside(x):
    """Step with ``H(0) = 1``."""
    return (np.asarray(x) >= 0).astype(np.float64)


def _draw(noise: EscapeNoise, x, rng):
    """Spikes and probabilities for ``x = u - theta``."""
    if not noise.stochastic:
        s = heaviside(x)
        return s, s.copy()
    p = expit(noise.beta * x)
    if isinstance(rng, np.random.Generator):
        xi = rng.random(np.shape(x))
    else:
        xi = np.asarray(rng, dtype=np.float64)
        if xi.shape != np.shape(x):
            raise ShapeError(f"uniform draws of shape {xi.shape} do not match membrane shape {np.shape(x)}")
    return (xi < p).astype(np.float64), p


def lif_step(state: LifState, params: LifParams, ff, rec, noise: EscapeNoise = DETERMINISTIC, rng=None, step=None):
    """Advance one timestep.

    ``ff`` and ``rec`` are the weighted feedforward and recurrent spike inputs of
    step n. ``rng`` is a ``numpy.random.Generator`` or a pre-drawn uniform array
    (ignored for deterministic firing). Returns ``(new_state, spikes, p)``.
    """
    I, U, S = state.I, state.U, state.S_prev
    if not (np.shape(I) == np.shape(U) == np.shape(S)):
        raise ShapeError("state vectors I, U, S_prev differ in shape")
    lm, ls = params.lam_mem, params.lam_syn
    I_new = ls * I + ff + rec
    if params.reset_mode == "next-step":
        U_new = (lm * U + (1.0 - lm) * I) * (1.0 - S)
    else:
        U_new = lm * U * (1.0 - S) + (1.0 - lm) * I
    bad = ~np.isfinite(U_new)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise NumericError(f"non-finite membrane potential at neuron {tuple(idx)} step {step}",
                           index=tuple(int(k) for k in idx), step=step)
    spikes, p = _draw(noise, U_new - params.theta, rng)
    return LifState(I_new, U_new, spikes), spikes, p


def perceptron_forward(W, b, x, theta=1.0, noise: EscapeNoise = DETERMINISTIC, rng=None):
    """``u = W^T x + b`` followed by Heaviside or Bernoulli firing. Returns ``(y, p, u)``."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != x.shape[-1]:
        raise ShapeError(f"weights {W.shape} incompatible with input {x.shape}")
    u = x @ W + b
    y, p = _draw(noise, u - theta, rng)
    return y, p, u


def stochastic_threshold_sample(theta, beta, rng, size=None):
    """Realized threshold ``theta + logit(x) / beta`` with ``x ~ U(0, 1)``.

    ``P(u >= Theta) = sigma_beta(u - theta)``, i.e. the same firing law as
    Bernoulli escape noise.
    """
    if not beta > 0:
        raise PreconditionError("beta must be positive")
    x = rng.random(size) if isinstance(rng, np.random.Generator) else np.asarray(rng, dtype=np.float64)
    return theta + logit(x) / beta
