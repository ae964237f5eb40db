import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gradutil import grad_errors
from lsformer import tensor as tt
from lsformer.neuron import (
    RELAXED,
    SPIKING,
    LIFParams,
    LIFState,
    heaviside_spike,
    lif_sequence,
    lif_step,
    relaxed_spike,
    surrogate_grad,
)
from lsformer.tensor import ConfigError, ShapeError, Tensor

P = LIFParams()


def test_quiescent_neuron():
    s, state = lif_step(Tensor(np.zeros(4)), LIFState.resting((4,), P), P)
    assert not s.data.any() and not state.u.data.any()


def test_hand_trace_four_steps():
    current = np.full((4, 1), 1.5, dtype=np.float32)
    spikes = lif_sequence(Tensor(current), LIFParams(tau=2.0, u_th=1.0, u_reset=0.0)).data
    # v: 0.75, 1.125 (fire, reset to 0), 0.75, 1.125 (fire)
    assert spikes.ravel().tolist() == [0.0, 1.0, 0.0, 1.0]
    state = LIFState.resting((1,), P)
    vs = []
    for t in range(4):
        prev = state.u.data.copy()
        s, state = lif_step(Tensor(current[t]), state, P)
        vs.append(float(prev[0] + (1.5 - prev[0]) / 2))
        if s.item() == 1:
            assert state.u.item() == 0.0
    assert vs == [0.75, 1.125, 0.75, 1.125]


def test_fires_exactly_at_threshold():
    # u = 0, I = 2 -> v = 1.0 = u_th
    s, state = lif_step(Tensor(np.array([2.0])), LIFState.resting((1,), P), P)
    assert s.item() == 1.0 and state.u.item() == 0.0


def test_step_shape_mismatch():
    with pytest.raises(ShapeError):
        lif_step(Tensor(np.zeros(3)), LIFState.resting((4,), P), P)


def test_empty_sequence_rejected():
    with pytest.raises(ShapeError):
        lif_sequence(Tensor(np.zeros((0, 3))), P)


@pytest.mark.parametrize("kwargs", [{"tau": 1.0}, {"u_th": 0.0}, {"surrogate_width": 0.0}, {"mode": "soft"}])
def test_param_validation(kwargs):
    with pytest.raises(ConfigError):
        LIFParams(**kwargs)


def test_single_step_sequence_equals_lif_step():
    x = np.random.default_rng(0).uniform(0, 3, (1, 5)).astype(np.float32)
    s, _ = lif_step(Tensor(x[0]), LIFState.resting((5,), P), P)
    np.testing.assert_array_equal(lif_sequence(Tensor(x), P).data[0], s.data)


def test_constant_drive_fires_periodically():
    # I = 2 tau u_th: v jumps to exactly u_th from rest, so every step fires
    current = np.full((8, 1), 2 * P.tau * P.u_th, dtype=np.float32)
    out = lif_sequence(Tensor(current), P).data
    np.testing.assert_array_equal(out, oracles.lif(current.astype(np.float64)))
    assert out.sum() == 8


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 5), st.floats(1.1, 5), st.integers(0, 2**16))
def test_sequence_matches_scalar_loop(steps, width, tau, seed):
    x = np.random.default_rng(seed).uniform(-1, 4, (steps, width))
    got = lif_sequence(Tensor(x.astype(np.float64)), LIFParams(tau=tau)).data
    np.testing.assert_array_equal(got, oracles.lif(x, tau=tau))


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 3, (4, 6, 3)).astype(np.float32)
    perm = rng.permutation(6)
    np.testing.assert_array_equal(lif_sequence(Tensor(x[:, perm]), P).data, lif_sequence(Tensor(x), P).data[:, perm])


@given(st.integers(0, 2**16))
def test_spiking_outputs_are_binary(seed):
    x = np.random.default_rng(seed).normal(0, 3, (5, 7)).astype(np.float32)
    out = lif_sequence(Tensor(x), P).data
    assert np.all((out == 0) | (out == 1))


@given(st.integers(0, 2**16))
def test_membrane_stays_bounded_and_resets(seed):
    x = np.random.default_rng(seed).uniform(0, 1, (10, 6))
    state = LIFState.resting((6,), P)
    for t in range(10):
        s, state = lif_step(Tensor(x[t]), state, P)
        u = state.u.data
        assert np.all(u >= P.u_reset) and np.all(u <= P.u_th + 1.0)
        assert np.all(u[s.data == 1] == P.u_reset)


def test_heaviside_forward_and_surrogate():
    x = Tensor(np.array([-1.0, 0.0, 1.0]), requires_grad=True)
    out = heaviside_spike(x, 2.0)
    assert out.data.tolist() == [0.0, 1.0, 1.0]
    tt.backward(tt.tsum(out))
    assert x.grad[1] == pytest.approx(1.0)
    np.testing.assert_allclose(x.grad, surrogate_grad(np.array([-1.0, 0.0, 1.0]), 2.0))
    assert heaviside_spike(Tensor(np.array([0.0])), 2.0, RELAXED).item() == 0.5


def test_relaxed_derivative_is_the_surrogate():
    # the surrogate is the exact derivative of the relaxed forward
    x = np.linspace(-2, 2, 41)
    h = 1e-6
    numeric = (relaxed_spike(x + h, 2.0) - relaxed_spike(x - h, 2.0)) / (2 * h)
    np.testing.assert_allclose(numeric, surrogate_grad(x, 2.0), rtol=1e-6)


def test_relaxed_converges_to_step_for_wide_surrogate():
    x = np.concatenate([np.linspace(-3, -0.5, 20), np.linspace(0.5, 3, 20)])
    gap = np.abs(relaxed_spike(x, 200.0) - (x >= 0)).max()
    assert gap <= 0.01
    assert np.abs(relaxed_spike(x, 2.0) - (x >= 0)).max() > 0.01


def test_relaxed_toy_gradient_two_steps_eight_neurons():
    x = np.random.default_rng(2).uniform(0, 3, (2, 8))
    assert max(grad_errors(lambda a: lif_sequence(a, LIFParams(mode=RELAXED)), x)) <= 1e-3


@pytest.mark.parametrize("mode", [SPIKING, RELAXED])
@pytest.mark.parametrize("detach", [True, False])
def test_fused_sequence_matches_composed_steps(mode, detach):
    p = LIFParams(mode=mode, detach_reset=detach)
    x0 = np.random.default_rng(3).uniform(0, 3, (4, 6))
    with tt.default_dtype(np.float64):
        xa = Tensor(x0.copy(), requires_grad=True)
        out_a = lif_sequence(xa, p)
        tt.backward(tt.tsum(tt.mul(out_a, Tensor(np.arange(24.0).reshape(4, 6)))))

        xb = Tensor(x0.copy(), requires_grad=True)
        state = LIFState.resting((6,), p)
        outs = []
        for t in range(4):
            s, state = lif_step(tt.getitem(xb, t), state, p)
            outs.append(s.reshape(1, 6))
        out_b = tt.concat(outs, axis=0)
        tt.backward(tt.tsum(tt.mul(out_b, Tensor(np.arange(24.0).reshape(4, 6)))))
    np.testing.assert_allclose(out_a.data, out_b.data, atol=1e-12)
    np.testing.assert_allclose(xa.grad, xb.grad, atol=1e-10)


def test_detach_reset_only_applies_to_spiking_mode():
    assert LIFParams().detaches_reset
    assert not LIFParams(mode=RELAXED).detaches_reset
    assert not LIFParams(detach_reset=False).detaches_reset


def test_surrogate_peak_value():
    assert surrogate_grad(np.array(0.0), 2.0) == 1.0
    assert surrogate_grad(np.array(1.0), 2.0) == pytest.approx(1.0 / (1 + math.pi**2))
