"""Spike derivative rules: surrogate families, Bernoulli stochastic triples and
their smoothing, and the reset-path recursion of the LIF membrane.

Sigmoid conventions used throughout::

    sigma_beta(x)       = 1 / (1 + exp(-beta * x))
    sigma_prime_beta(x) = beta * sigma_beta(x) * (1 - sigma_beta(x))

so ``sigma_prime_beta`` is the true derivative of ``sigma_beta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DegenerateDistributionError, PreconditionError

# Clamp used when building triples from probabilities produced during training.
P_CLAMP = 1e-12


def sigmoid(x, beta=1.0):
    return expit(beta * np.asarray(x, dtype=np.float64))


def sigmoid_prime(x, beta=1.0):
    s = sigmoid(x, beta)
    return beta * s * (1.0 - s)


def superspike(x, beta=1.0):
    """Fast-sigmoid derivative scaled by 1/beta: ``1 / (beta*|x| + 1)**2``."""
    return 1.0 / (beta * np.abs(np.asarray(x, dtype=np.float64)) + 1.0) ** 2


@dataclass(frozen=True)
class StochasticTriple:
    """``(delta, weight, alternate)``: almost-sure part, jump-probability
    derivative and the value taken after a jump."""

    delta: float
    weight: float
    alternate: float

    def __iter__(self):
        return iter((self.delta, self.weight, self.alternate))


ZERO_TRIPLE = StochasticTriple(0.0, 0.0, 0.0)


def _check_p(p):
    if not 0.0 < p < 1.0:
        raise DegenerateDistributionError(f"Bernoulli parameter must lie in (0, 1), got {p!r}")


def _check_outcome(outcome):
    if outcome not in (0, 1):
        raise PreconditionError(f"Bernoulli outcome must be 0 or 1, got {outcome!r}")


def bernoulli_triple(p: float, outcome: int, side: str = "right") -> StochasticTriple:
    """Stochastic derivative of ``Ber(p)`` with respect to ``p``.

    The right derivative only sees jumps 0 -> 1, the left one only 1 -> 0.
    """
    _check_p(p)
    _check_outcome(outcome)
    if side == "right":
        return StochasticTriple(0.0, 1.0 / (1.0 - p), 1.0) if outcome == 0 else ZERO_TRIPLE
    if side == "left":
        return StochasticTriple(0.0, -1.0 / p, 0.0) if outcome == 1 else ZERO_TRIPLE
    raise PreconditionError(f"side must be 'left' or 'right', got {side!r}")


def smooth_triple(t: StochasticTriple, outcome: float) -> float:
    """Smoothed stochastic derivative ``delta + w * (Y - x)`` given the realization ``x``."""
    return t.delta + t.weight * (t.alternate - outcome)


def bernoulli_smoothed(p: float, outcome: int, side: str) -> float:
    return smooth_triple(bernoulli_triple(p, outcome, side), outcome)


def bernoulli_affine_smoothed(p: float, outcome: int, weight_right: float | None = None) -> float:
    """Affine mix ``a * right + (1 - a) * left`` of the smoothed Bernoulli derivatives.

    The default mixing weight ``a = 1 - p`` makes the result 1 for either outcome.
    """
    # the default left weight is p itself, not 1 - (1 - p), to avoid cancellation
    a, b = (1.0 - p, p) if weight_right is None else (weight_right, 1.0 - weight_right)
    return a * bernoulli_smoothed(p, outcome, "right") + b * bernoulli_smoothed(p, outcome, "left")


def composed_spike_derivative(u, theta, beta, outcome, side="affine"):
    """Smoothed Bernoulli derivative chained with ``dp/du`` for ``p = sigma_beta(u - theta)``.

    right  -> beta * sigma * 1[y = 0]
    left   -> beta * (1 - sigma) * 1[y = 1]
    affine -> beta * sigma * (1 - sigma), independent of the outcome
    """
    if beta <= 0:
        raise PreconditionError("beta must be positive")
    s = sigmoid(np.asarray(u, dtype=np.float64) - theta, beta)
    y = np.asarray(outcome)
    if side == "right":
        return beta * s * (y == 0)
    if side == "left":
        return beta * (1.0 - s) * (y == 1)
    if side == "affine":
        # (1 - p) * right + p * left, written out so the outcome cancels exactly
        return (1.0 - s) * (beta * s * (y == 0)) + s * (beta * (1.0 - s) * (y == 1))
    raise PreconditionError(f"side must be 'left', 'right' or 'affine', got {side!r}")


def reset_term(U, I, lam_mem, sd):
    """Extra coefficient on dU contributed by differentiating through the reset."""
    return sd * (lam_mem * U + (1.0 - lam_mem) * I)


def lif_membrane_adjoint_step(dU, dI, U, I, S, params, rule, d_input=0.0):
    """Propagate membrane/current sensitivities one step (next-step reset).

    Given ``dU = dU[n]/dw`` and ``dI = dI[n]/dw`` and the state ``(U[n], I[n],
    S[n])``, returns ``(dU[n+1]/dw, dI[n+1]/dw)``::

        dU[n+1] = (lam_m (1 - S) - SD(U - theta) (lam_m U + (1 - lam_m) I)) dU
                  + (1 - lam_m)(1 - S) dI
        dI[n+1] = lam_s dI + d_input

    The reset term is dropped unless ``rule.backprop_through_reset``.
    ``d_input`` is the direct derivative of the synaptic drive at step n.
    """
    lam_m, lam_s = params.lam_mem, params.lam_syn
    sd = rule.derivative(np.asarray(U, dtype=np.float64) - params.theta)
    coef = lam_m * (1.0 - S)
    if rule.backprop_through_reset:
        coef = coef - reset_term(U, I, lam_m, sd)
    dU_next = coef * dU + (1.0 - lam_m) * (1.0 - S) * dI
    dI_next = lam_s * dI + d_input
    return dU_next, dI_next
