import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from teformer import numerics as nx
from teformer.errors import ContractError
from teformer.neurons import (RELAXED, LifParams, LifState, broken_surrogate, lif_sequence, lif_step,
                              record_firing_rates, spike, surrogate_grad)
from teformer.numerics import Parameter

P = LifParams()

floats = st.floats(-5, 5, allow_nan=False, width=32)


def run_steps(xs, p=P):
    state, spikes, hs, vs = LifState(), [], [], []
    for x in xs:
        v_prev = state.v.data if state.v is not None else np.zeros_like(np.asarray(x, dtype=np.float32))
        s, state = lif_step(state, np.asarray(x, dtype=np.float32), p)
        hs.append(v_prev + (np.asarray(x) - v_prev) / p.tau)
        spikes.append(s.data)
        vs.append(state.v.data)
    return np.array(spikes), np.array(hs), np.array(vs)


def test_rest_stays_at_rest():
    s, h, v = run_steps([0.0])
    assert (s[0], h[0], v[0]) == (0.0, 0.0, 0.0)


def test_one_step_fire_and_reset():
    s, h, v = run_steps([2.5])
    assert h[0] == pytest.approx(1.25)
    assert s[0] == 1.0 and v[0] == 0.0


def test_subthreshold_constant_input_trace():
    s, h, _ = run_steps([0.8] * 12)
    np.testing.assert_allclose(h[:3], [0.4, 0.6, 0.7], atol=1e-6)
    assert np.all(s == 0)
    assert np.all(np.diff(h) > 0) and h[-1] < 0.8


def test_sequence_examples():
    np.testing.assert_array_equal(lif_sequence(np.array([2.5, 2.5]), P).data, [1, 1])
    np.testing.assert_array_equal(lif_sequence(np.zeros((5, 3)), P).data, 0)


def test_sequence_of_length_one_is_one_step():
    x = np.array([[0.3, 2.0, 5.0]])
    s, _ = lif_step(LifState(), x[0], P)
    np.testing.assert_array_equal(lif_sequence(x, P).data[0], s.data)


def test_params_validated():
    with pytest.raises(ContractError):
        LifParams(tau=0.5)
    with pytest.raises(ContractError):
        LifParams(v_th=0.0, v_rest=0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 5)), elements=floats))
def test_spikes_binary_and_hard_reset(x):
    s, _, v = run_steps(list(x))
    assert set(np.unique(s)) <= {0.0, 1.0}
    np.testing.assert_array_equal(v[s == 1], P.v_reset)
    assert np.all(v < P.v_th)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 5)), elements=floats),
       st.sampled_from(["spiking", "relaxed"]))
def test_fused_sequence_matches_folded_steps(x, mode):
    p = LifParams(mode=mode)
    folded, _, _ = run_steps(list(x), p)
    np.testing.assert_allclose(lif_sequence(x, p).data, folded, atol=1e-6)


@pytest.mark.parametrize("mode", ["spiking", "relaxed"])
@pytest.mark.parametrize("seed", range(5))
def test_fused_backward_matches_folded_steps(mode, seed):
    rng = np.random.default_rng(seed)
    p = LifParams(mode=mode)
    x = rng.normal(1.0, 1.0, size=(6, 4))
    g = rng.normal(size=(6, 4))
    X1 = Parameter("x1", x)
    nx.backward(nx.sum_(nx.mul(lif_sequence(X1, p), g)))
    X2 = Parameter("x2", x)
    state, outs = LifState(), []
    for t in range(6):
        s, state = lif_step(state, nx.take(X2, t), p)
        outs.append(s)
    nx.backward(nx.sum_(nx.mul(nx.stack(outs, 0), g)))
    np.testing.assert_allclose(X1.grad, X2.grad, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_relaxed_sequence_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = Parameter("x", rng.normal(1.0, 0.8, size=(5, 3)))
    c = rng.normal(size=(5, 3))
    report = nx.grad_check(lambda: nx.sum_(nx.mul(lif_sequence(X, P.relaxed()), c)), [X])
    assert report.max_rel_err < 1e-4


def test_broken_surrogate_is_detected():
    X = Parameter("x", np.linspace(0.0, 3.0, 6).reshape(3, 2))
    with broken_surrogate(0.5):
        report = nx.grad_check(lambda: nx.sum_(lif_sequence(X, P.relaxed())), [X])
    assert not report.passed


@settings(max_examples=50, deadline=None)
@given(floats, floats)
def test_relaxed_output_monotone_and_bounded(a, b):
    lo, hi = sorted([a, b])
    p = P.relaxed()
    s = spike(np.array([lo, hi], dtype=np.float64), p).data
    assert 0.0 <= s[0] <= s[1] <= 1.0
    assert 0.0 < spike(np.array([0.0]), p).data[0] < 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(2.0001, 50))
def test_relaxed_and_spiking_agree_when_saturated(d):
    for h in (P.v_th + d, P.v_th - d):
        hs = np.array([h])
        assert abs(spike(hs, P.relaxed()).data[0] - spike(hs, P).data[0]) < 1e-3


def test_surrogate_peak():
    assert surrogate_grad(np.array([P.v_th]), P)[0] == pytest.approx(1.0)


def test_firing_rates_recorded():
    with record_firing_rates() as rates:
        lif_sequence(np.array([[2.5, 0.0]]), P, name="layer")
    assert rates == {"layer": [0.5]}


def test_relaxed_mode_never_resets():
    s, state = lif_step(LifState(), np.array([4.0]), LifParams(mode=RELAXED))
    assert state.v.data[0] == pytest.approx(2.0)
