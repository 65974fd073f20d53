"""Gradient estimators for small stochastic binary programs.

A :class:`BernoulliProgram` is a DAG of binary nodes evaluated in index order::

    u_k = A[k, :k] . s[:k] + B[k] . x + b[k]
    s_k = 1[xi_k < sigma_beta(u_k)]
    f   = c . s

The flat parameter vector is ``(A[edges], B.ravel(), b)``. Every estimator
here differentiates ``E[f]`` with respect to that vector, so the enumeration
oracles (exact for up to 12 nodes) can check them all on equal footing.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import EnumerationSizeError, PreconditionError
from .rng import as_counter_rng
from .surrogate import composed_spike_derivative
from .tape import SpikeGradRule, Tape, backward, param_grads

MAX_ENUM_NODES = 12


@dataclass
class EstimatorReport:
    estimator: str
    mean: np.ndarray
    variance: np.ndarray
    n_samples: int
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.variance = np.atleast_1d(np.asarray(self.variance, dtype=np.float64))
        if self.n_samples < 1:
            raise PreconditionError("n_samples must be >= 1")
        if np.any(self.variance < 0):
            raise PreconditionError("variance must be non-negative")

    def to_dict(self, include_time=False):
        d = {"estimator": self.estimator, "mean": self.mean.tolist(),
             "variance": self.variance.tolist(), "n_samples": self.n_samples, **self.extra}
        if include_time:
            d["wall_time"] = self.wall_time
        return d

    def to_json(self, include_time=False):
        return json.dumps(self.to_dict(include_time), sort_keys=True)


class BernoulliProgram:
    def __init__(self, A, B, b, x, c, beta=1.0, edges=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.K = self.A.shape[0]
        self.edges = np.tril(np.ones((self.K, self.K), bool), -1) if edges is None else np.asarray(edges, bool)
        if np.any(np.triu(self.edges)):
            raise PreconditionError("edges must point from lower to higher node index")
        self.A = np.where(self.edges, self.A, 0.0)
        self.x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        self.B = np.asarray(B, dtype=np.float64).reshape(self.K, self.x.size)
        self.b = np.asarray(b, dtype=np.float64).reshape(self.K)
        self.c = np.asarray(c, dtype=np.float64).reshape(self.K)
        self.beta = float(beta)
        self.n_noise = self.K
        nA = int(self.edges.sum())
        self._a_index = np.full((self.K, self.K), -1)
        self._a_index[self.edges] = np.arange(nA)
        self._nA, self._nB = nA, self.B.size

    # parameters -------------------------------------------------------
    @property
    def n_params(self):
        return self._nA + self._nB + self.K

    @property
    def theta(self):
        return np.concatenate([self.A[self.edges], self.B.ravel(), self.b])

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        A = np.zeros_like(self.A)
        A[self.edges] = theta[:self._nA]
        B = theta[self._nA:self._nA + self._nB].reshape(self.B.shape)
        b = theta[self._nA + self._nB:]
        return A, B, b

    def with_theta(self, theta):
        A, B, b = self.unpack(theta)
        return BernoulliProgram(A, B, b, self.x, self.c, self.beta, self.edges)

    # simulation -------------------------------------------------------
    def _u(self, k, s, A, B, b):
        return s[:, :k] @ A[k, :k] + B[k] @ self.x + b[k]

    def sample(self, xi, theta=None, start=0, s=None):
        """Binary outcomes ``[n, K]`` and probabilities for uniforms ``xi [n, K]``.

        With ``start`` and ``s`` given, nodes before ``start`` are taken from ``s``.
        """
        A, B, b = (self.A, self.B, self.b) if theta is None else self.unpack(theta)
        xi = np.atleast_2d(xi)
        s = np.zeros(xi.shape) if s is None else s.copy()
        p = np.zeros(xi.shape)
        for k in range(start, self.K):
            p[:, k] = expit(self.beta * self._u(k, s, A, B, b))
            s[:, k] = xi[:, k] < p[:, k]
        return s, p

    def probs_along(self, s, theta=None):
        """``p_k`` for fixed outcome rows ``s [n, K]`` (every upstream node held at ``s``)."""
        A, B, b = (self.A, self.B, self.b) if theta is None else self.unpack(theta)
        return np.stack([expit(self.beta * self._u(k, s, A, B, b)) for k in range(self.K)], axis=1)

    def output(self, s):
        return s @ self.c

    def evaluate(self, theta, xi):
        s, _ = self.sample(xi, theta)
        return self.output(s)

    def du_dtheta(self, k, s):
        """``d u_k / d theta`` for outcome rows ``s [n, K]``; shape ``[n, n_params]``."""
        out = np.zeros((s.shape[0], self.n_params))
        for j in np.flatnonzero(self.edges[k]):
            out[:, self._a_index[k, j]] = s[:, j]
        out[:, self._nA + k * self.x.size:self._nA + (k + 1) * self.x.size] = self.x
        out[:, self._nA + self._nB + k] = 1.0
        return out

    def dp_dtheta(self, s, p):
        """``[n, K, n_params]`` direct derivatives of every firing probability."""
        dp = np.stack([self.du_dtheta(k, s) for k in range(self.K)], axis=1)
        return (self.beta * p * (1.0 - p))[:, :, None] * dp


def bernoulli_chain(weights, beta=1.0, x=1.0, bias=0.0):
    """``x -> s_0 -> s_1 -> ...``; node 0 has input weight ``weights[0]``."""
    weights = np.asarray(weights, dtype=np.float64)
    K = weights.size
    A = np.zeros((K, K))
    edges = np.zeros((K, K), bool)
    for k in range(1, K):
        A[k, k - 1] = weights[k]
        edges[k, k - 1] = True
    B = np.zeros((K, 1))
    B[0, 0] = weights[0]
    c = np.zeros(K)
    c[-1] = 1.0
    return BernoulliProgram(A, B, np.full(K, bias), [x], c, beta, edges)


def bernoulli_mlp(widths, weights, biases, x, beta=1.0, readout=None):
    """Layered binary network; ``weights[l]`` is ``[widths[l], fan_in]``.

    Layer 0 is driven by the deterministic input ``x``. The output is the
    sum of the last layer (or ``readout . s_last``).
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    K = int(sum(widths))
    A = np.zeros((K, K))
    edges = np.zeros((K, K), bool)
    B = np.zeros((K, x.size))
    offsets = np.concatenate([[0], np.cumsum(widths)])
    for l, w in enumerate(weights):
        w = np.asarray(w, dtype=np.float64)
        rows = slice(offsets[l], offsets[l + 1])
        if l == 0:
            B[rows] = w
        else:
            cols = slice(offsets[l - 1], offsets[l])
            A[rows, cols] = w
            edges[rows, cols] = True
    c = np.zeros(K)
    c[offsets[-2]:] = 1.0 if readout is None else readout
    return BernoulliProgram(A, B, np.concatenate([np.atleast_1d(bi) for bi in biases]), x, c, beta, edges)


def benchmark_mlp():
    """2-2-1 binary MLP used for the estimator comparisons."""
    return bernoulli_mlp(
        (2, 2, 1),
        [np.array([[0.8, -0.5], [0.3, 0.9]]), np.array([[1.2, -0.7], [-0.4, 1.1]]), np.array([[1.5, -1.0]])],
        [np.array([-0.2, 0.1]), np.array([0.0, -0.3]), np.array([0.2])],
        x=[1.0, 0.5], beta=2.0)


def random_program(rng: np.random.Generator, n_nodes=None, n_inputs=2, density=0.6):
    K = int(rng.integers(1, MAX_ENUM_NODES + 1)) if n_nodes is None else n_nodes
    edges = np.tril(rng.random((K, K)) < density, -1)
    return BernoulliProgram(rng.normal(0, 1.5, (K, K)), rng.normal(0, 1, (K, n_inputs)), rng.normal(0, 1, K),
                            rng.normal(0, 1, n_inputs), rng.normal(0, 1, K),
                            beta=float(rng.uniform(0.5, 3.0)), edges=edges)


# enumeration oracles ------------------------------------------------------

def _check_enum(program):
    if program.K > MAX_ENUM_NODES:
        raise EnumerationSizeError(f"{program.K} binary nodes exceed the enumeration cap of {MAX_ENUM_NODES}")


def all_paths(K):
    """Every outcome pattern; node ``k`` is bit ``K-1-k`` so prefixes are contiguous."""
    idx = np.arange(2 ** K)
    return ((idx[:, None] >> (K - 1 - np.arange(K))) & 1).astype(np.float64)


def _path_table(program):
    _check_enum(program)
    s = all_paths(program.K)
    p = program.probs_along(s)
    q = np.where(s == 1, p, 1.0 - p)
    return s, p, q


def _leave_one_out(q):
    """``prod_{j != k} q[:, j]`` without division."""
    n, K = q.shape
    left = np.ones((n, K + 1))
    right = np.ones((n, K + 1))
    for k in range(K):
        left[:, k + 1] = left[:, k] * q[:, k]
        right[:, K - 1 - k] = right[:, K - k] * q[:, K - 1 - k]
    return left[:, :K] * right[:, 1:]


def exact_expectation(program) -> float:
    s, _, q = _path_table(program)
    return float(np.prod(q, axis=1) @ program.output(s))


def brute_force_grad(program) -> np.ndarray:
    """``d E[f] / d theta`` by differentiating every path probability."""
    s, p, q = _path_table(program)
    dp = program.dp_dtheta(s, p)
    loo = _leave_one_out(q)
    dP = np.einsum("nk,nkj->nj", loo * (2 * s - 1), dp)
    return program.output(s) @ dP


def conditional_values(program):
    """``V[k][prefix] = E[f | s_{<k} = prefix]`` for every level ``k = 0..K``."""
    s, p, _ = _path_table(program)
    K = program.K
    V = [None] * (K + 1)
    V[K] = program.output(s)
    for k in range(K - 1, -1, -1):
        pk = p[:, k].reshape(2 ** k, -1)[:, 0]
        nxt = V[k + 1].reshape(2 ** k, 2)
        V[k] = pk * nxt[:, 1] + (1.0 - pk) * nxt[:, 0]
    return V


def triple_expectation(program) -> np.ndarray:
    """Exact mean of :func:`forward_triple_grad` by enumerating outcome paths.

    For each path, the alternate output after a jump at node ``k`` is replaced
    by its conditional mean given the prefix, which leaves the expectation
    unchanged because downstream draws are independent of ``xi_k``.
    """
    s, p, q = _path_table(program)
    K = program.K
    V = conditional_values(program)
    f = V[K]
    dp = program.dp_dtheta(s, p)
    loo = _leave_one_out(q)
    idx = np.arange(2 ** K)
    total = np.zeros(program.n_params)
    for k in range(K):
        prefix = idx >> (K - k)
        alt = V[k + 1][2 * prefix + (1 - s[:, k]).astype(int)]
        up = dp[:, k] > 0
        # jump 0 -> 1 weighted dp/(1-p); jump 1 -> 0 weighted -dp/p; P(s) cancels one factor
        right = np.where(up & (s[:, k] == 0)[:, None], (alt - f)[:, None], 0.0)
        left = np.where(~up & (s[:, k] == 1)[:, None], (f - alt)[:, None], 0.0)
        total += np.einsum("n,nj->j", loo[:, k], dp[:, k] * (right + left))
    return total


# per-sample estimators ----------------------------------------------------

def forward_triple_grad(program, n, rng, enumerate_expectation=False):
    """Unsmoothed stochastic-triple estimates, one row per sample ``[n, n_params]``.

    A jump at node ``k`` flips ``s_k`` and re-runs every later node on the same
    uniforms (common random numbers). Returns ``(report, estimates)``; with
    ``enumerate_expectation`` the report carries the exact mean.
    """
    if enumerate_expectation:
        _check_enum(program)
    t0 = time.perf_counter()
    xi = as_counter_rng(rng).child(1).uniform((n, program.K))
    s, p = program.sample(xi)
    f = program.output(s)
    dp = program.dp_dtheta(s, p)
    est = np.zeros((n, program.n_params))
    for k in range(program.K):
        flipped = s.copy()
        flipped[:, k] = 1.0 - s[:, k]
        s_alt, _ = program.sample(xi, start=k + 1, s=flipped)
        delta_f = program.output(s_alt) - f
        up = dp[:, k] > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(up & (s[:, k] == 0)[:, None], dp[:, k] / (1.0 - p[:, k:k + 1]), 0.0)
            w = w + np.where(~up & (s[:, k] == 1)[:, None], -dp[:, k] / p[:, k:k + 1], 0.0)
        est += w * delta_f[:, None]
    extra = {}
    if enumerate_expectation:
        extra["expectation"] = triple_expectation(program).tolist()
    rep = EstimatorReport("forward_triple", est.mean(0), _var(est), n, time.perf_counter() - t0, extra)
    return rep, est


def _var(a):
    return a.var(axis=0, ddof=1) if a.shape[0] > 1 else np.zeros(a.shape[1:])


def _smoothed_tape(program, uniforms):
    """Record the program for a batch of paths with per-path parameter copies."""
    n = uniforms.shape[0]
    K, nx = program.K, program.x.size
    tape = Tape()
    A = tape.param(np.broadcast_to(program.A, (n, K, K)), "A")
    B = tape.param(np.broadcast_to(program.B, (n, K, nx)), "B")
    b = tape.param(np.broadcast_to(program.b, (n, K)), "b")
    x = tape.const(program.x[:, None])
    spikes = []
    for k in range(K):
        terms = [tape.sum(tape.matmul(tape.gather(B, k, axis=1), x), axis=-1), tape.gather(b, k, axis=1)]
        row = tape.gather(A, k, axis=1)
        for j in np.flatnonzero(program.edges[k]):
            terms.append(tape.mul(tape.gather(row, int(j), axis=1), spikes[j]))
        u = tape.add(*terms)
        spikes.append(tape.bernoulli_spike(u, 0.0, program.beta, uniforms[:, k], layer=k))
    out = tape.add(*[tape.scale(sk, ck) for sk, ck in zip(spikes, program.c)])
    tape.output = out
    return tape, spikes


def _smoothed_rows(program, uniforms):
    tape, spikes = _smoothed_tape(program, uniforms)
    rule = SpikeGradRule("sigmoid-derivative", beta=program.beta)
    backward(tape, np.ones(uniforms.shape[0]), rule)
    g = param_grads(tape)
    e = program.edges
    rows = np.concatenate([g["A"][:, e], g["B"].reshape(len(uniforms), -1), g["b"]], axis=1)
    s = np.stack([tape.values[i] for i in spikes], axis=1)
    return rows, s


def smoothed_stochad_grad(program, n_paths, rng):
    """Path-wise smoothed derivative (affine smoothing = sigmoid SD with
    ``beta_SG = beta_N``) averaged over ``n_paths`` sampled paths."""
    t0 = time.perf_counter()
    xi = as_counter_rng(rng).child(2).uniform((n_paths, program.K))
    rows, _ = _smoothed_rows(program, xi)
    return EstimatorReport("smoothed_stochad", rows.mean(0), _var(rows), n_paths, time.perf_counter() - t0), rows


def smoothed_expectation(program) -> np.ndarray:
    """Exact mean of the smoothed path-wise derivative over all outcome paths."""
    s, _, q = _path_table(program)
    forced = np.where(s == 1, 0.0, 1.0)  # 0 < p fires, 1 < p never does
    rows, _ = _smoothed_rows(program, forced)
    return np.prod(q, axis=1) @ rows


def spm_single_unit_grad(u, theta, beta, x):
    """Derivative of the expected output of one escape-noise Perceptron."""
    s = expit(beta * (np.asarray(u, dtype=np.float64) - theta))
    return np.asarray(x, dtype=np.float64) * beta * s * (1.0 - s)


def single_unit_equivalence(u, theta=1.0, beta_n=10.0, beta_sg=10.0, x=1.0, rng=0):
    """Three derivatives of one escape-noise Perceptron w.r.t. its input weight on a grid of ``u``.

    ``surrogate``: sigmoid-derivative SD (``beta_sg``) backpropagated through a
    sampled spike. ``expected``: derivative of ``E[y]``. ``smoothed``: affine
    smoothed stochastic derivative of the sampled outcome. With
    ``beta_sg == beta_n`` all three coincide for every outcome.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    xi = as_counter_rng(rng).child(6).uniform(u.size)
    tape = Tape()
    w = tape.param(np.zeros(u.size), "w")
    # u = w x + b evaluated at w = 0
    drive = tape.add(tape.mul(w, tape.const(np.full(u.size, float(x)))), tape.const(u))
    spike = tape.bernoulli_spike(drive, theta, beta_n, xi)
    tape.output = spike
    backward(tape, np.ones(u.size), SpikeGradRule("sigmoid-derivative", beta_sg))
    out = {"surrogate": tape.grad("w"),
           "expected": spm_single_unit_grad(u, theta, beta_n, x),
           "smoothed": x * composed_spike_derivative(u, theta, beta_n, tape.values[spike], "affine"),
           "outcome": tape.values[spike]}
    keys = ("surrogate", "expected", "smoothed")
    out["max_deviation"] = float(max(np.max(np.abs(out[a] - out[b])) for i, a in enumerate(keys)
                                     for b in keys[i + 1:]))
    return out


# finite differences --------------------------------------------------------

@dataclass
class CallableProgram:
    """Any ``evaluate(theta, xi[n, n_noise]) -> [n]`` program."""

    evaluate: object
    theta: np.ndarray
    n_noise: int = 0


def _fd(program, dw, n, rng, components, coupled, w):
    if dw == 0:
        raise PreconditionError("perturbation dw must be non-zero")
    theta = program.theta if w is None else np.asarray(w, dtype=np.float64)
    comps = range(theta.size) if components is None else components
    rng = as_counter_rng(rng)
    t0 = time.perf_counter()
    est = np.zeros((n, len(comps)))
    for col, j in enumerate(comps):
        shift = theta.copy()
        shift[j] += dw
        xi0 = rng.child(3, j, 0).uniform((n, program.n_noise))
        xi1 = xi0 if coupled else rng.child(3, j, 1).uniform((n, program.n_noise))
        est[:, col] = (program.evaluate(shift, xi1) - program.evaluate(theta, xi0)) / dw
    name = "fd_coupled" if coupled else "fd_uncoupled"
    return EstimatorReport(name, est.mean(0), _var(est), n, time.perf_counter() - t0, {"dw": dw}), est


def fd_uncoupled(program, dw, n, rng, components=None, w=None):
    """Forward differences with independent noise before and after the perturbation."""
    return _fd(program, dw, n, rng, components, False, w)


def fd_coupled(program, dw, n, rng, components=None, w=None):
    """Forward differences on common random numbers."""
    return _fd(program, dw, n, rng, components, True, w)


# non-exchangeability -------------------------------------------------------

@dataclass
class NonExchangeReport:
    exact: float
    factorized: float

    @property
    def gap(self):
        return self.exact - self.factorized

    def to_dict(self):
        return {"exact": self.exact, "factorized": self.factorized, "gap": self.gap}


def demonstrate_nonexchange(w1, w2, wy, x=1.0, beta=1.0):
    """Chain ``x -> h1 -> h2 -> y`` of single binary units without biases.

    ``exact`` is ``d E[y] / d w1`` by enumeration; ``factorized`` multiplies the
    separately expected local derivatives ``E[dp_y/dh2] E[dp_2/dh1] E[dp_1/dw1]``.
    """
    prog = bernoulli_chain([w1, w2, wy], beta=beta, x=x)
    exact = float(brute_force_grad(prog)[prog._nA])  # input weight of node 0
    s, p, q = _path_table(prog)
    P = np.prod(q, axis=1)

    def sp(k):
        return beta * p[:, k] * (1.0 - p[:, k])

    factorized = float((P @ (sp(2) * wy)) * (P @ (sp(1) * w2)) * (P @ (sp(0) * x)))
    return NonExchangeReport(exact, factorized)
