"""Diagnostics: the three-layer sigmoid example net, closed-path integrals of
(surrogate) gradient fields, van Rossum distance, Fano factors and
gradient-bias statistics."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import oaconvolve

from .errors import KernelDegenerateError, PreconditionError, ShapeError, UndefinedFanoError
from .rng import as_counter_rng
from .tape import Tape, backward

PARAM_NAMES = ("w", "v1", "v2", "u1", "u2")


@dataclass(frozen=True)
class ExampleNet:
    w: float = 0.0
    v1: float = 0.05
    v2: float = 0.1
    u1: float = 1.0
    u2: float = -1.0
    beta_f: float = 100.0
    beta_sg: float = 25.0
    x: float = 1.0

    def __post_init__(self):
        if not (self.beta_f > 0 and self.beta_sg > 0):
            raise PreconditionError("beta_f and beta_sg must be positive")

    @property
    def params(self):
        return np.array([getattr(self, k) for k in PARAM_NAMES])

    def at(self, params):
        return replace(self, **dict(zip(PARAM_NAMES, map(float, params))))


TABLE1 = ExampleNet()


def _record(net: ExampleNet, params, grad_beta):
    """Tape of the example net evaluated at a batch of parameter points ``[n, 5]``."""
    tape = Tape()
    w, v1, v2, u1, u2 = (tape.param(params[:, i], n) for i, n in enumerate(PARAM_NAMES))
    x = tape.const(net.x)
    bf = net.beta_f
    g = tape.sigmoid(tape.mul(w, x), bf, grad_beta)
    h1 = tape.sigmoid(tape.mul(v1, g), bf, grad_beta)
    h2 = tape.sigmoid(tape.mul(v2, g), bf, grad_beta)
    y = tape.sigmoid(tape.add(tape.mul(u1, h1), tape.mul(u2, h2)), bf, grad_beta)
    tape.output = y
    return tape, (g, h1, h2, y)


def example_net_forward(net: ExampleNet):
    """``(g, h1, h2, y)`` at the net's parameters."""
    tape, ids = _record(net, net.params[None], None)
    return tuple(float(tape.values[i][0]) for i in ids)


def example_net_grad_field(net: ExampleNet, points, surrogate: bool):
    """Gradient of ``y`` w.r.t. ``(w, v1, v2, u1, u2)`` at every row of ``points``.

    With ``surrogate`` each local sigmoid derivative uses ``beta_sg`` at the
    same pre-activation; the forward pass always uses ``beta_f``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tape, _ = _record(net, points, net.beta_sg if surrogate else None)
    backward(tape, np.ones(points.shape[0]))
    return np.stack([tape.grad(n) for n in PARAM_NAMES], axis=1)


def example_net_surrogate_grad(net: ExampleNet):
    """``(surrogate dy/dw, true dy/dw)`` at the net's parameters."""
    p = net.params[None]
    return (float(example_net_grad_field(net, p, True)[0, 0]),
            float(example_net_grad_field(net, p, False)[0, 0]))


def signflip_sweep(net: ExampleNet, w_values):
    """Surrogate and true ``dy/dw`` over a sweep of ``w``; returns both arrays
    and the index intervals where their signs disagree."""
    pts = np.repeat(net.params[None], len(w_values), axis=0)
    pts[:, 0] = w_values
    sg = example_net_grad_field(net, pts, True)[:, 0]
    tr = example_net_grad_field(net, pts, False)[:, 0]
    flag = np.sign(sg) * np.sign(tr) < 0
    intervals = []
    start = None
    for i, f in enumerate(flag):
        if f and start is None:
            start = i
        if not f and start is not None:
            intervals.append((start, i - 1))
            start = None
    if start is not None:
        intervals.append((start, len(flag) - 1))
    return sg, tr, flag, intervals


# closed-path integral ------------------------------------------------------

@dataclass
class LoopSpec:
    center: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    r: float = 1.0
    n_steps: int = 2 ** 16

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.d1 = np.asarray(self.d1, dtype=np.float64)
        self.d2 = np.asarray(self.d2, dtype=np.float64)
        if self.n_steps < 8:
            raise PreconditionError("n_steps must be >= 8")
        if (abs(np.linalg.norm(self.d1) - 1) > 1e-12 or abs(np.linalg.norm(self.d2) - 1) > 1e-12
                or abs(self.d1 @ self.d2) > 1e-12):
            raise PreconditionError("d1 and d2 must be orthonormal")


def random_directions(dim, rng):
    """Two orthonormal directions from a seeded Gaussian via Gram-Schmidt."""
    a, b = as_counter_rng(rng).child(4).normal((2, dim))
    d1 = a / np.linalg.norm(a)
    b = b - (b @ d1) * d1
    return d1, b / np.linalg.norm(b)


def loop_points(loop: LoopSpec, n):
    alpha = 2 * np.pi * np.arange(n) / n
    sa, ca = np.sin(alpha)[:, None], np.cos(alpha)[:, None]
    theta = loop.center + loop.r * (sa * loop.d1 + ca * loop.d2)
    dtheta = loop.r * (ca * loop.d1 - sa * loop.d2)
    return alpha, theta, dtheta


def loop_integrand(field, loop: LoopSpec, n):
    alpha, theta, dtheta = loop_points(loop, n)
    return alpha, np.einsum("ij,ij->i", field(theta), dtheta)


def loop_integral(field, loop: LoopSpec, n_min=2 ** 8):
    """Trapezoid rule (periodic, so all weights equal) of ``field . dtheta/dalpha``
    around the circle. Returns ``(I at loop.n_steps, {n: I_n})`` over doublings
    from ``n_min``."""
    series = {}
    n = min(n_min, loop.n_steps)
    while n <= loop.n_steps:
        _, vals = loop_integrand(field, loop, n)
        series[n] = float(vals.sum() * 2 * np.pi / n)
        n *= 2
    return series[max(series)], series


def example_loop(net: ExampleNet, rng, r=1.0, n_steps=2 ** 16, center=None):
    d1, d2 = random_directions(len(PARAM_NAMES), rng)
    return LoopSpec(net.params if center is None else center, d1, d2, r, n_steps)


# spike-train statistics ---------------------------------------------------

def alpha_kernel(tau_mem, tau_syn, dt):
    if tau_mem == tau_syn:
        raise KernelDegenerateError("alpha kernel is undefined for tau_mem == tau_syn")
    t = np.arange(0.0, 5 * max(tau_mem, tau_syn) + 0.5 * dt, dt)
    return (np.exp(-t / tau_syn) - np.exp(-t / tau_mem)) / (1.0 - tau_mem / tau_syn)


def van_rossum(a, b, tau_mem=10.0, tau_syn=5.0, dt=1.0):
    """Half the squared L2 distance of the kernel-filtered rasters ``[T, N]``.

    The filtered traces keep the full convolution tail, so nothing past the
    last timestep is lost. Leading batch axes are reduced into the sum.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"raster shapes differ: {a.shape} vs {b.shape}")
    k = alpha_kernel(tau_mem, tau_syn, dt)
    diff = a - b
    if not diff.any():
        return 0.0
    kshape = [1] * diff.ndim
    kshape[-2] = k.size
    filt = oaconvolve(diff, k.reshape(kshape), mode="full", axes=diff.ndim - 2)
    return float(0.5 * np.sum(filt ** 2) * dt)


def fano_factor(raster, window=None):
    """Variance-to-mean ratio of spike activity.

    ``[T, N]``: over all entries. ``[trials, T, N]``: trial-to-trial sample
    variance (ddof 1) of each (time, neuron) cell averaged over cells, divided
    by the mean activity; a single trial falls back to the 2-D definition.
    ``window`` applies a moving average of that many steps along time first.
    """
    s = np.asarray(raster, dtype=np.float64)
    if s.size == 0 or s.ndim not in (2, 3):
        raise PreconditionError("fano_factor needs a non-empty [T, N] or [trials, T, N] raster")
    if window is not None:
        if not 1 <= window <= s.shape[-2]:
            raise PreconditionError(f"window must lie in [1, T], got {window}")
        axis = s.ndim - 2
        s = uniform_filter1d(s, window, axis=axis, mode="constant")
        lo = window // 2
        hi = s.shape[axis] - (window - 1 - window // 2)
        s = s[:, lo:hi] if s.ndim == 3 else s[lo:hi]
    if s.ndim == 3 and s.shape[0] == 1:
        s = s[0]
    mu = s.mean()
    if mu <= 0:
        raise UndefinedFanoError("Fano factor undefined for a silent raster")
    var = s.var() if s.ndim == 2 else s.var(axis=0, ddof=1).mean()
    return float(var / mu)


@dataclass
class BiasStats:
    cosines: np.ndarray
    components: np.ndarray  # [2, P]
    projections: np.ndarray  # [m, 2]
    reference_projection: np.ndarray
    mean_projection: np.ndarray
    explained_variance: np.ndarray

    def to_dict(self):
        return {"cosines": self.cosines.tolist(), "projections": self.projections.tolist(),
                "reference_projection": self.reference_projection.tolist(),
                "mean_projection": self.mean_projection.tolist(),
                "explained_variance": self.explained_variance.tolist(),
                "mean_cosine": float(self.cosines.mean())}


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise PreconditionError("cosine similarity undefined for a zero-norm vector")
    return float(a @ b / (na * nb))


def gradient_bias_stats(grads, reference):
    """Cosine of each gradient against ``reference`` and a 2-component PCA.

    Principal axes come from the SVD of the centred stack (the eigenvectors of
    its covariance); projections use the uncentred gradients.
    """
    G = np.asarray([np.ravel(g) for g in grads], dtype=np.float64)
    ref = np.ravel(np.asarray(reference, dtype=np.float64))
    if G.shape[0] < 2:
        raise PreconditionError("need at least two gradients")
    if G.shape[1] != ref.size:
        raise ShapeError("gradients and reference differ in length")
    cos = np.array([cosine(g, ref) for g in G])
    centred = G - G.mean(0)
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    comps = np.zeros((2, G.shape[1]))
    k = min(2, vt.shape[0])
    comps[:k] = vt[:k]
    ev = np.zeros(2)
    ev[:k] = sv[:k] ** 2 / (G.shape[0] - 1)
    return BiasStats(cos, comps, G @ comps.T, comps @ ref, comps @ G.mean(0), ev)
