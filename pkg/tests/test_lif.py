import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdiformer.errors import ParameterError, StateError
from hdiformer.lif import (FiringMeter, LIFParams, LIFState, firing_rate, lif_sequence, lif_step,
                           surrogate_grad)
from hdiformer.numcore import Tape, Tensor, backward, ops, precision


def scalar_lif(xs, tau=2.0, v_th=1.0, v_reset=0.0):
    """Reference recurrence for one neuron; returns spikes, H values and V after each step."""
    v = v_reset
    spikes, hs, vs = [], [], []
    for x in xs:
        h = v + (x - (v - v_reset)) / tau
        s = 1.0 if h - v_th >= 0 else 0.0
        v = h * (1 - s) + v_reset * s
        spikes.append(s)
        hs.append(h)
        vs.append(v)
    return spikes, hs, vs


def test_one_step_fires_and_resets():
    s, st_ = lif_step(None, Tensor([2.0]), LIFParams(tau=2, v_th=1, v_reset=0))
    assert s.data.tolist() == [1.0]
    assert st_.v.data.tolist() == [0.0]


def test_resting_state():
    s, st_ = lif_step(None, Tensor([0.0]))
    assert s.data.tolist() == [0.0] and st_.v.data.tolist() == [0.0]


def test_constant_subthreshold_converges():
    with precision(64):
        state = None
        for _ in range(60):
            s, state = lif_step(state, Tensor([0.6]))
            assert s.data[0] == 0.0
        assert state.v.data[0] == pytest.approx(0.6, abs=1e-12)
    _, _, vs = scalar_lif([0.6] * 60)
    assert vs[-1] == pytest.approx(0.6, abs=1e-12)


def test_sequence_zero_input():
    assert not lif_sequence(Tensor(np.zeros((4, 3, 2)))).data.any()


def test_sequence_t1_equals_step():
    x = np.random.default_rng(0).normal(size=(1, 5)) * 3
    s_seq = lif_sequence(Tensor(x)).data[0]
    s_step, _ = lif_step(None, Tensor(x[0]))
    np.testing.assert_array_equal(s_seq, s_step.data)


def test_sequence_matches_scalar_recurrence():
    with precision(64):
        x = np.random.default_rng(1).normal(size=(4, 6, 3)) * 2
        out = lif_sequence(Tensor(x), LIFParams(v_th=0.5)).data
    for i in range(6):
        for j in range(3):
            spikes, _, _ = scalar_lif(x[:, i, j], v_th=0.5)
            np.testing.assert_array_equal(out[:, i, j], spikes)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_binary_closure_and_reset(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=3, size=(5, 7))
    out = lif_sequence(Tensor(x)).data
    assert set(np.unique(out)).issubset({0.0, 1.0})
    state = None
    for t in range(5):
        s, state = lif_step(state, Tensor(x[t]))
        assert np.all(state.v.data[s.data == 1] == 0.0)


def test_subthreshold_linearity():
    with precision(64):
        x = np.random.default_rng(2).uniform(-1, 0.9, size=(10, 4))
        state = None
        v = np.zeros(4)
        for t in range(10):
            s, state = lif_step(state, Tensor(x[t]))
            v = v + (x[t] - v) / 2.0
            assert not s.data.any()
            np.testing.assert_array_equal(state.v.data, v)


def test_surrogate_values():
    assert surrogate_grad(0.0) == 1.0
    assert surrogate_grad(1 / math.pi) == pytest.approx(0.5, abs=1e-15)
    assert surrogate_grad(10.0) == surrogate_grad(-10.0) < 1e-2


def hand_bptt(xs, tau=2.0, v_th=1.0):
    """dL/dx_t for L = sum_t S_t with detached reset and v_reset = 0.

    H_t = (1 - 1/tau) V_{t-1} + x_t / tau,  V_t = H_t (1 - S_t)
    dL/dx_t = (1/tau) * sum_{k>=t} sg(H_k - v_th) * prod_{j=t}^{k-1} (1 - 1/tau)(1 - S_j)
    """
    spikes, hs, _ = scalar_lif(xs, tau, v_th)
    sg = [1.0 / (1.0 + (math.pi * (h - v_th)) ** 2) for h in hs]
    grads = []
    for t in range(len(xs)):
        total, chain = 0.0, 1.0
        for k in range(t, len(xs)):
            total += sg[k] * chain
            chain *= (1 - 1 / tau) * (1 - spikes[k])
        grads.append(total / tau)
    return grads


@pytest.mark.parametrize("xs", [[0.5, 1.2, 0.3], [2.5, 0.1, 1.9], [-0.4, 0.8, 3.0]])
def test_single_neuron_bptt_oracle(xs):
    with precision(64):
        x = Tensor(np.array(xs).reshape(3, 1), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(lif_sequence(x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad[:, 0], hand_bptt(xs), rtol=0, atol=1e-10)


def test_params_validation():
    with pytest.raises(ParameterError):
        LIFParams(tau=0)
    with pytest.raises(ParameterError):
        LIFParams(v_th=0.0, v_reset=0.0)


def test_firing_rates():
    m = FiringMeter()
    with pytest.raises(StateError):
        firing_rate(m)
    m.record("a", np.zeros((2, 4)))
    assert firing_rate(m, "a") == 0.0
    m.record("b", np.ones((2, 4)))
    assert firing_rate(m, "b") == 1.0
    half = np.zeros((3, 4))
    half[:, :2] = 1
    m.record("c", half)
    assert firing_rate(m, "c") == 0.5
    assert 0.0 <= firing_rate(m) <= 1.0
    assert firing_rate(m) == pytest.approx((0 + 8 + 6) / (8 + 8 + 12))


def test_state_shape_checked():
    from hdiformer.errors import ShapeError
    with pytest.raises(ShapeError):
        lif_step(LIFState(Tensor(np.zeros(3))), Tensor(np.zeros(2)))
