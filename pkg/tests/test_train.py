import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikegrad.analysis import van_rossum
from spikegrad.data import SyntheticClassSpec, poisson_raster, synthetic_classes, train_val_split
from spikegrad.errors import CalibrationError, PreconditionError, ShapeError
from spikegrad.network import LayerSpec, NetworkConfig, backprop_path, rollout
from spikegrad.neuron import DETERMINISTIC, EscapeNoise
from spikegrad.train import (RegularizerSpec, Smorms3State, activity_regularizer, classification_network,
                             cross_evaluation, evaluate, fluctuation_init, l2_spike_loss, matching_eval,
                             matching_network, matching_rule, max_over_time_ce, smorms3_step,
                             train_classify, train_matching, van_rossum_loss)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_l2_loss_example():
    S = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    tgt = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 1.0]])
    loss, grad = l2_spike_loss(S, tgt)
    assert loss == 1.5
    np.testing.assert_array_equal(grad, (S - tgt))
    loss_b, _ = l2_spike_loss(np.stack([S, tgt]), tgt)
    assert loss_b == 0.75
    with pytest.raises(ShapeError):
        l2_spike_loss(S, tgt[:2])


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 12, 3), elements=st.floats(-1, 2)))
def test_l2_gradient_finite_difference(S):
    tgt = (np.arange(36).reshape(12, 3) % 5 == 0).astype(float)
    np.testing.assert_allclose(l2_spike_loss(S, tgt)[1], fd_grad(lambda s: l2_spike_loss(s, tgt)[0], S), atol=1e-6)


def test_van_rossum_loss_matches_distance_and_gradient():
    g = np.random.default_rng(0)
    S = (g.random((2, 20, 3)) < 0.3).astype(float)
    tgt = (g.random((20, 3)) < 0.3).astype(float)
    loss, grad = van_rossum_loss(S, tgt, 10.0, 5.0, 1.0)
    assert loss == pytest.approx(np.mean([van_rossum(s, tgt, 10.0, 5.0, 1.0) for s in S]), rel=1e-10)
    num = fd_grad(lambda s: van_rossum_loss(s, tgt, 10.0, 5.0, 1.0)[0], S)
    np.testing.assert_allclose(grad, num, atol=1e-6)


def test_max_over_time_ce_example():
    trace = np.zeros((1, 4, 2))
    trace[0, 2, 0] = 1.0
    trace[0, 1, 1] = -0.5
    loss, grad, pred = max_over_time_ce(trace, [0])
    # per-class maxima are (1, 0)
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), rel=1e-14)
    assert pred[0] == 0
    # the subgradient sits at the first maximal step of each class
    assert grad[0, 2, 0] == pytest.approx(-1 / (1 + math.e), rel=1e-14)
    assert grad[0, 0, 1] == pytest.approx(1 / (1 + math.e), rel=1e-14)
    assert np.count_nonzero(grad) == 2


def test_max_over_time_ce_gradient_finite_difference():
    trace = np.random.default_rng(4).normal(size=(3, 10, 4))
    y = np.array([0, 3, 1])
    _, grad, _ = max_over_time_ce(trace, y)
    num = fd_grad(lambda t: max_over_time_ce(t, y)[0], trace)
    np.testing.assert_allclose(grad, num, atol=1e-7)


def test_max_over_time_ce_validation():
    with pytest.raises(PreconditionError):
        max_over_time_ce(np.zeros((1, 5, 1)), [0])
    with pytest.raises(ShapeError):
        max_over_time_ce(np.zeros((2, 5, 3)), [0, 3])


def test_activity_regularizer():
    spec = RegularizerSpec(theta_upper=2.0, lam_upper=0.5)
    S = np.zeros((2, 10, 2))
    S[0, :4, 0] = 1  # counts (4, 0): mean 2, no excess
    S[1, :, :] = 1  # counts (10, 10): excess 8
    pen, (g,) = activity_regularizer([S], spec)
    assert pen == 0.5 * 64
    assert not g[0].any() and np.all(g[1] == 2 * 0.5 * 8 / 2)
    num = fd_grad(lambda s: activity_regularizer([s], spec)[0], S + 0.01)
    np.testing.assert_allclose(activity_regularizer([S + 0.01], spec)[1][0], num, atol=1e-6)
    with pytest.raises(PreconditionError):
        RegularizerSpec(theta_upper=0.0)


def reference_smorms3(params, grads_seq, lr, eps=1e-16):
    """Scalar loop transcription of the original optimizer."""
    p = np.array(params, dtype=float)
    mem, g, g2 = np.ones_like(p), np.zeros_like(p), np.zeros_like(p)
    for grad in grads_seq:
        for i in range(p.size):
            r = 1 / (mem[i] + 1)
            g[i] = (1 - r) * g[i] + r * grad[i]
            g2[i] = (1 - r) * g2[i] + r * grad[i] ** 2
            x = g[i] * g[i] / (g2[i] + eps)
            p[i] -= grad[i] * min(lr, x) / (math.sqrt(g2[i]) + eps)
            mem[i] = 1 + mem[i] * (1 - x)
    return p


def test_smorms3_first_step():
    st_ = Smorms3State(lr=0.01)
    _, d = smorms3_step(st_, {"w": np.array([3.0, -0.2])})
    np.testing.assert_allclose(d["w"], [-0.01 * math.sqrt(2), 0.01 * math.sqrt(2)], rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)), st.floats(1e-4, 0.5))
def test_smorms3_matches_reference(grads, lr):
    st_ = Smorms3State(lr=lr)
    p = np.array([0.1, -0.2, 0.3])
    for g in grads:
        _, d = smorms3_step(st_, {"w": g})
        p = p + d["w"]
    np.testing.assert_allclose(p, reference_smorms3([0.1, -0.2, 0.3], grads, lr), rtol=1e-10, atol=1e-12)


def test_smorms3_literal_rule_differs():
    grads = [np.array([2.0]), np.array([-1.0]), np.array([0.5])]
    a, b = Smorms3State(lr=0.1), Smorms3State(lr=0.1, m_rule="literal")
    for g in grads:
        smorms3_step(a, {"w": g})
        smorms3_step(b, {"w": g})
    assert a.m["w"][0] != b.m["w"][0]


def small_lif(stochastic=False, T=100):
    return matching_network(stochastic, n_in=30, n_hidden=20, n_out=10, T=T)


def test_fluctuation_init_hits_target_std():
    net, measured = fluctuation_init(small_lif(), sigma_u=1.0, rate=50.0, rng=1)
    assert all(abs(m - 1.0) <= 0.2 for m in measured)
    assert np.std(net.layers[0].W) > 0 and abs(np.mean(net.layers[0].W)) < 0.5 * np.std(net.layers[0].W)
    again, _ = fluctuation_init(small_lif(), sigma_u=1.0, rate=50.0, rng=1)
    np.testing.assert_array_equal(net.layers[1].W, again.layers[1].W)


def test_fluctuation_init_recurrent_with_readout():
    net = classification_network(False, n_in=40, hidden=(16, 16), n_classes=3, T=100)
    net, measured = fluctuation_init(net, sigma_u=1.0, rate=50.0, rng=2)
    assert len(measured) == 3 and all(abs(m - 1.0) <= 0.2 for m in measured)
    assert net.layers[0].V.any()


def test_fluctuation_init_errors():
    with pytest.raises(PreconditionError):
        fluctuation_init(small_lif(), rate=0.0)
    with pytest.raises(PreconditionError):
        fluctuation_init(small_lif(), calib_input=np.zeros((100, 30)))
    perceptron = NetworkConfig([LayerSpec(np.zeros((2, 3)))], None, 5)
    with pytest.raises(PreconditionError):
        fluctuation_init(perceptron)
    # a single input spike on the last step never reaches the membrane
    x = np.zeros((100, 30))
    x[-1, 0] = 1
    with pytest.raises(CalibrationError):
        fluctuation_init(small_lif(), calib_input=x)


def _matching_setup(stochastic):
    net, _ = fluctuation_init(small_lif(stochastic), 1.0, 50.0, 0)
    x = poisson_raster(30, 100, 50.0, 1.0, 5)
    tgt = (np.random.default_rng(3).random((100, 10)) < 0.05).astype(float)
    return net, x, tgt


def test_train_matching_single_step_is_plain_descent():
    net, x, tgt = _matching_setup(False)
    rule = matching_rule(False)
    res = rollout(net, x, 0)
    grads = backprop_path(res, l2_spike_loss(res.output, tgt)[1], rule)
    out = train_matching(net, x, tgt, 1, rule, lr=0.3, rng=0)
    for k, g in grads.items():
        np.testing.assert_allclose(out.net.weights()[k], net.weights()[k] - 0.3 * g, rtol=1e-13, atol=1e-15)
    assert out.history[0]["loss"] == l2_spike_loss(res.output, tgt)[0]


def test_train_matching_layer_learning_rates_and_zero_lr():
    net, x, tgt = _matching_setup(False)
    out = train_matching(net, x, tgt, 3, matching_rule(False), lr={"hid": 0.0, "out": 0.0})
    assert len(set(out.column("loss"))) == 1
    np.testing.assert_array_equal(out.net.layers[0].W, net.layers[0].W)
    out = train_matching(net, x, tgt, 1, matching_rule(False), lr={"hid": 0.0, "out": 1.0})
    np.testing.assert_array_equal(out.net.layers[0].W, net.layers[0].W)


def test_train_matching_reduces_loss():
    for stochastic in (False, True):
        net, x, tgt = _matching_setup(stochastic)
        out = train_matching(net, x, tgt, 40, matching_rule(stochastic), lr={"hid": 0.3, "out": 1.0})
        assert not out.aborted
        before = matching_eval(net, x, tgt, 7, n_trials=10)["loss"]
        after = matching_eval(out.net, x, tgt, 7, n_trials=10)["loss"]
        assert after < before


def test_train_matching_aborts_on_non_finite_loss():
    net, x, tgt = _matching_setup(False)
    tgt[0, 0] = np.nan
    out = train_matching(net, x, tgt, 5, matching_rule(False), lr=0.3)
    assert out.aborted and len(out.history) == 1


def test_matching_eval_fields():
    net, x, tgt = _matching_setup(True)
    r = matching_eval(net, x, tgt, 0, n_trials=4)
    assert {"loss", "vr", "fano0", "fano1", "rate0", "rate1"} <= set(r)
    assert r == matching_eval(net, x, tgt, 0, n_trials=4)


def test_matching_rules():
    assert matching_rule(True).family == "sigmoid-derivative"
    assert matching_rule(False).family == "superspike"


@pytest.fixture(scope="module")
def tiny_classify():
    spec = SyntheticClassSpec(n_classes=3, n_in=20, T=30, n_samples=8, seed=1)
    tr, va = train_val_split(synthetic_classes(spec), 0.25, 0)
    net = classification_network(True, n_in=20, hidden=(8,), n_classes=3, T=30)
    net, _ = fluctuation_init(net, 1.0, 30.0, 0, calib_input=tr.x[:4])
    return net, tr, va


def test_train_classify_runs_and_is_reproducible(tiny_classify):
    net, tr, va = tiny_classify
    rule = matching_rule(True)
    a = train_classify(net, tr, va, 3, rule, lr=0.01, batch_size=6, rng=0)
    b = train_classify(net, tr, va, 3, rule, lr=0.01, batch_size=6, rng=0)
    assert len(a.history) == 3 and "train_acc" in a.history[-1] and "val_acc" in a.history[-1]
    assert a.history == b.history
    for k, w in a.net.weights().items():
        np.testing.assert_array_equal(w, b.net.weights()[k])


def test_evaluate_and_cross_evaluation(tiny_classify):
    net, tr, _ = tiny_classify
    acc, loss = evaluate(net, tr.x, tr.y, 0)
    assert 0 <= acc <= 1 and loss > 0
    det_acc, _ = evaluate(net, tr.x, tr.y, 0, noise=DETERMINISTIC, n_trials=3)
    assert det_acc == evaluate(net, tr.x, tr.y, 5, noise=DETERMINISTIC)[0]
    cx = cross_evaluation({"s": net}, tr.x, tr.y, {"det": DETERMINISTIC, "sto": EscapeNoise("sigmoid", 10.0)}, 0)
    assert set(cx) == {"s"} and set(cx["s"]) == {"det", "sto"}
