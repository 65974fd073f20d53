import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from spikegrad.errors import EnumerationSizeError, PreconditionError
from spikegrad.estimators import (MAX_ENUM_NODES, BernoulliProgram, CallableProgram, EstimatorReport,
                                  all_paths, benchmark_mlp, bernoulli_chain, bernoulli_mlp,
                                  brute_force_grad, demonstrate_nonexchange, exact_expectation,
                                  fd_coupled, fd_uncoupled, forward_triple_grad, random_program,
                                  single_unit_equivalence, smoothed_expectation, smoothed_stochad_grad,
                                  spm_single_unit_grad, triple_expectation)
from spikegrad.rng import CounterRNG

seeds = st.integers(0, 2 ** 32 - 1)


def small_program(seed, max_nodes=6):
    g = np.random.default_rng(seed)
    return random_program(g, n_nodes=int(g.integers(1, max_nodes + 1)))


def central_fd(program, h=1e-6):
    th = program.theta
    out = np.zeros(th.size)
    for j in range(th.size):
        e = np.zeros(th.size)
        e[j] = h
        out[j] = (exact_expectation(program.with_theta(th + e)) - exact_expectation(program.with_theta(th - e))) / (2 * h)
    return out


def ci(rows, k=4.5):
    return k * rows.std(axis=0, ddof=1) / np.sqrt(rows.shape[0])


def test_all_paths_order():
    np.testing.assert_array_equal(all_paths(2), [[0, 0], [0, 1], [1, 0], [1, 1]])
    assert all_paths(5).shape == (32, 5)


def test_benchmark_program_size():
    prog = benchmark_mlp()
    # 6 edges, 5 x 2 input weights, 5 biases
    assert prog.K == 5 and prog.n_params == 21


def test_single_node_expectation():
    prog = BernoulliProgram(np.zeros((1, 1)), [[0.7]], [0.2], [2.0], [3.0], beta=1.5)
    p = expit(1.5 * (0.7 * 2.0 + 0.2))
    assert exact_expectation(prog) == pytest.approx(3.0 * p, rel=1e-14)
    dp = 1.5 * p * (1 - p)
    np.testing.assert_allclose(brute_force_grad(prog), 3.0 * dp * np.array([2.0, 1.0]), rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_brute_force_grad_matches_finite_differences(seed):
    prog = small_program(seed)
    np.testing.assert_allclose(brute_force_grad(prog), central_fd(prog), rtol=0, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_triple_expectation_is_unbiased(seed):
    prog = small_program(seed, MAX_ENUM_NODES)
    np.testing.assert_allclose(triple_expectation(prog), brute_force_grad(prog), rtol=0, atol=1e-10)


def test_exact_expectation_matches_monte_carlo():
    prog = benchmark_mlp()
    xi = CounterRNG(5).uniform((200_000, prog.K))
    f = prog.evaluate(prog.theta, xi)
    assert abs(f.mean() - exact_expectation(prog)) < 4.5 * f.std() / np.sqrt(f.size)


def test_forward_triple_sample_mean_within_interval():
    prog = benchmark_mlp()
    rep, rows = forward_triple_grad(prog, 20_000, CounterRNG(1), enumerate_expectation=True)
    exact = brute_force_grad(prog)
    np.testing.assert_allclose(rep.extra["expectation"], exact, atol=1e-12)
    assert np.all(np.abs(rep.mean - exact) < ci(rows))
    np.testing.assert_allclose(rep.variance, rows.var(axis=0, ddof=1))


def test_smoothed_single_node_is_exact():
    prog = BernoulliProgram(np.zeros((1, 1)), [[0.4, -0.3]], [0.1], [1.0, 2.0], [1.0], beta=2.0)
    np.testing.assert_allclose(smoothed_expectation(prog), brute_force_grad(prog), rtol=1e-13)


def test_smoothed_monte_carlo_matches_enumeration():
    prog = benchmark_mlp()
    rep, rows = smoothed_stochad_grad(prog, 20_000, CounterRNG(2))
    assert np.all(np.abs(rep.mean - smoothed_expectation(prog)) < ci(rows))


def test_smoothed_is_biased_on_deep_programs():
    prog = benchmark_mlp()
    assert np.max(np.abs(smoothed_expectation(prog) - brute_force_grad(prog))) > 1e-3


def test_single_unit_equivalence_grid():
    u = np.linspace(-1, 3, 41)
    r = single_unit_equivalence(u, theta=1.0, beta_n=4.0, beta_sg=4.0, x=2.0, rng=3)
    np.testing.assert_allclose(r["expected"], spm_single_unit_grad(u, 1.0, 4.0, 2.0))
    assert r["max_deviation"] < 1e-12
    mismatched = single_unit_equivalence(u, theta=1.0, beta_n=4.0, beta_sg=8.0, x=2.0, rng=3)
    assert mismatched["max_deviation"] > 0.1


def test_enumeration_cap():
    big = random_program(np.random.default_rng(0), n_nodes=MAX_ENUM_NODES + 1)
    for fn in (exact_expectation, brute_force_grad, triple_expectation, smoothed_expectation):
        with pytest.raises(EnumerationSizeError):
            fn(big)
    with pytest.raises(EnumerationSizeError):
        forward_triple_grad(big, 5, 0, enumerate_expectation=True)
    forward_triple_grad(big, 5, 0)


def test_fd_requires_nonzero_step():
    with pytest.raises(PreconditionError):
        fd_uncoupled(benchmark_mlp(), 0.0, 10, 0)
    with pytest.raises(PreconditionError):
        fd_coupled(benchmark_mlp(), 0.0, 10, 0)


def test_fd_means_match_exact_difference_quotient():
    prog = benchmark_mlp()
    dw = 0.2
    th = prog.theta
    quotient = []
    for j in range(th.size):
        e = np.zeros(th.size)
        e[j] = dw
        quotient.append((exact_expectation(prog.with_theta(th + e)) - exact_expectation(prog)) / dw)
    for fd in (fd_uncoupled, fd_coupled):
        rep, rows = fd(prog, dw, 20_000, CounterRNG(4))
        assert np.all(np.abs(rep.mean - quotient) < ci(rows)), fd.__name__


def test_coupling_reduces_variance():
    prog = benchmark_mlp()
    unc = fd_uncoupled(prog, 0.1, 5000, CounterRNG(0))[0].variance
    cpl = fd_coupled(prog, 0.1, 5000, CounterRNG(0))[0].variance
    assert np.all(cpl < unc)


def test_fd_on_callable_program():
    prog = CallableProgram(lambda th, xi: (xi[:, 0] < th[0]).astype(float), np.array([0.3]), 1)
    rep, _ = fd_coupled(prog, 0.1, 10_000, CounterRNG(7), w=[0.3])
    assert rep.mean[0] == pytest.approx(1.0, abs=0.2)
    rep, _ = fd_uncoupled(prog, 0.1, 10, CounterRNG(7), components=[0])
    assert rep.mean.shape == (1,)


def test_nonexchange_exact_matches_closed_form():
    w1, w2, wy, x, beta = 1.0, 2.0, -1.5, 0.5, 1.3
    r = demonstrate_nonexchange(w1, w2, wy, x, beta)
    s = lambda v: expit(beta * v)  # noqa: E731
    g = lambda h1: s(w2 * h1) * s(wy) + (1 - s(w2 * h1)) * s(0.0)  # noqa: E731
    p1 = s(w1 * x)
    assert r.exact == pytest.approx(beta * x * p1 * (1 - p1) * (g(1) - g(0)), rel=1e-13)
    assert abs(r.gap) > 1e-3
    assert r.to_dict()["gap"] == r.gap


def test_chain_and_mlp_builders():
    prog = bernoulli_chain([0.5, 1.0, -2.0], beta=2.0, x=1.0)
    assert prog.K == 3 and prog.edges.sum() == 2 and prog.c.tolist() == [0, 0, 1]
    mlp = bernoulli_mlp((1, 1), [[[1.0]], [[2.0]]], [[0.0], [0.0]], x=[1.0])
    np.testing.assert_array_equal(mlp.theta, [2.0, 1.0, 0.0, 0.0, 0.0])
    with pytest.raises(PreconditionError):
        BernoulliProgram(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros(2), [1.0], np.ones(2),
                         edges=np.array([[False, True], [False, False]]))


def test_report_serialization():
    rep = EstimatorReport("x", [1.0], [0.5], 3, wall_time=1.2, extra={"dw": 0.1})
    d = rep.to_dict()
    assert "wall_time" not in d and d["dw"] == 0.1
    assert rep.to_dict(include_time=True)["wall_time"] == 1.2
    with pytest.raises(PreconditionError):
        EstimatorReport("x", [1.0], [-0.5], 3)
    with pytest.raises(PreconditionError):
        EstimatorReport("x", [1.0], [0.5], 0)


def test_estimators_are_seed_deterministic():
    prog = benchmark_mlp()
    for fn in (lambda r: forward_triple_grad(prog, 100, r)[1], lambda r: smoothed_stochad_grad(prog, 100, r)[1],
               lambda r: fd_coupled(prog, 0.1, 100, r)[1]):
        np.testing.assert_array_equal(fn(CounterRNG(9)), fn(CounterRNG(9)))
