import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gradutil import grad_errors
from lsformer import tensor as tt
from lsformer.neuron import RELAXED, LIFParams, lif_sequence
from lsformer.tensor import ConfigError, ShapeError, Tensor


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


# ---------------------------------------------------------------- conv2d


def test_conv_all_ones_sum():
    out = tt.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_output_geometry():
    out = tt.conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 1, 2, 2)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.uniform(-4, 4, (2, 3, 5, 5))
    w = rng.uniform(-1, 1, (4, 3, 3, 3))
    np.testing.assert_allclose(tt.conv2d(T(x), T(w), padding=1).data, oracles.conv2d(x, w, padding=1), atol=1e-5)


def test_conv_channel_mismatch_is_reported():
    with pytest.raises(ShapeError, match="channels"):
        tt.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 3, 3))))


@settings(max_examples=100)
@given(
    n=st.integers(1, 2),
    groups=st.sampled_from([1, 2]),
    cin_g=st.integers(1, 2),
    cout_g=st.integers(1, 2),
    hw=st.integers(3, 6),
    k=st.sampled_from([1, 2, 3]),
    stride=st.integers(1, 2),
    padding=st.integers(0, 1),
    dilation=st.integers(1, 2),
    seed=st.integers(0, 2**16),
)
def test_conv_oracle_property(n, groups, cin_g, cout_g, hw, k, stride, padding, dilation, seed):
    if hw + 2 * padding < dilation * (k - 1) + 1:
        return
    rng = np.random.default_rng(seed)
    x = rng.uniform(-4, 4, (n, groups * cin_g, hw, hw)).astype(np.float32)
    w = rng.uniform(-4, 4, (groups * cout_g, cin_g, k, k)).astype(np.float32)
    got = tt.conv2d(T(x), T(w), stride=stride, padding=padding, dilation=dilation, groups=groups).data
    want = oracles.conv2d(x.astype(np.float64), w.astype(np.float64), stride, padding, dilation, groups)
    np.testing.assert_allclose(got, want, atol=1e-5 * max(1.0, np.abs(want).max()))


# ---------------------------------------------------------------- depthwise


def test_depthwise_identity_kernel():
    x = np.random.default_rng(1).uniform(-4, 4, (1, 3, 5, 5))
    w = np.zeros((3, 1, 3, 3))
    w[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(tt.depthwise_conv2d(T(x), T(w), padding=1).data, T(x).data)


def test_depthwise_zero_kernel_zeroes_channel():
    rng = np.random.default_rng(2)
    w = rng.uniform(-1, 1, (2, 1, 3, 3))
    w[0] = 0
    out = tt.depthwise_conv2d(T(rng.uniform(-4, 4, (1, 2, 4, 4))), T(w), padding=1).data
    assert np.all(out[:, 0] == 0)
    assert np.any(out[:, 1] != 0)


def test_depthwise_matches_per_channel_loop():
    rng = np.random.default_rng(3)
    x = rng.uniform(-4, 4, (1, 4, 6, 6))
    w = rng.uniform(-1, 1, (4, 1, 3, 3))
    got = tt.depthwise_conv2d(T(x), T(w), padding=1).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, padding=1, groups=4), atol=1e-5)


def test_depthwise_rejects_channel_mixing_weight():
    with pytest.raises(ConfigError):
        tt.depthwise_conv2d(T(np.ones((1, 4, 4, 4))), T(np.ones((4, 2, 3, 3))))


# ---------------------------------------------------------------- batchnorm


def _bn(x, gamma, beta, training=True):
    c = x.shape[1]
    return tt.batchnorm(T(x), T(gamma), T(beta), np.zeros(c, np.float32), np.ones(c, np.float32), training)


def test_bn_already_normalised_input_passes_through():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((8, 2, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = _bn(x, np.ones(2), np.zeros(2)).data
    assert np.abs(out - x).max() <= 1e-4


def test_bn_zero_scale_gives_beta():
    beta = np.array([0.5, -2.0])
    out = _bn(np.random.default_rng(5).standard_normal((3, 2, 2, 2)), np.zeros(2), beta).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta.reshape(1, 2, 1, 1), out.shape).astype(np.float32))


def test_bn_batch_statistics():
    x = np.random.default_rng(6).uniform(-4, 4, (4, 3, 2, 2))
    out = _bn(x, np.ones(3), np.zeros(3)).data.astype(np.float64)
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() <= 1e-3


def test_bn_running_stats_update_and_eval_mode():
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 4, (6, 2, 3, 3)).astype(np.float32)
    rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
    tt.batchnorm(T(x), T(np.ones(2)), T(np.zeros(2)), rm, rv, True, momentum=0.1)
    flat = x.transpose(1, 0, 2, 3).reshape(2, -1).astype(np.float64)
    np.testing.assert_allclose(rm, 0.1 * flat.mean(axis=1), rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * flat.var(axis=1, ddof=1), rtol=1e-5)
    out = tt.batchnorm(T(x), T(np.ones(2)), T(np.zeros(2)), rm, rv, False).data
    np.testing.assert_allclose(out, (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5), rtol=1e-5)
    assert np.all(rv >= 0)


def test_bn_single_value_per_channel_in_training_is_an_error():
    with pytest.raises(ShapeError, match="variance"):
        _bn(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2))


# ---------------------------------------------------------------- matmul & elementwise


def test_matmul_identity_and_ones():
    b = np.random.default_rng(8).standard_normal((3, 2)).astype(np.float32)
    np.testing.assert_array_equal(tt.matmul(T(np.eye(3)), T(b)).data, b)
    assert tt.matmul(T([[1, 1]]), T([[1], [1]])).data.tolist() == [[2.0]]


def test_matmul_batched_vs_loop():
    rng = np.random.default_rng(9)
    a, b = rng.uniform(-4, 4, (2, 4, 5)), rng.uniform(-4, 4, (2, 5, 3))
    np.testing.assert_allclose(tt.matmul(T(a), T(b)).data, oracles.matmul(a, b), atol=1e-5 * 80)


@settings(max_examples=100)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**16))
def test_matmul_oracle_property(batch, m, k, p, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-4, 4, (batch, m, k)).astype(np.float32)
    b = rng.uniform(-4, 4, (batch, k, p)).astype(np.float32)
    want = oracles.matmul(a.astype(np.float64), b.astype(np.float64))
    np.testing.assert_allclose(tt.matmul(T(a), T(b)).data, want, atol=1e-5 * max(1.0, np.abs(want).max()))


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(ShapeError):
        tt.matmul(T(np.ones((2, 3))), T(np.ones((4, 2))))


def test_sigmoid_values():
    assert tt.sigmoid(T(0.0)).item() == 0.5
    assert abs(tt.sigmoid(T(3.0)).item() - 0.95257) <= 1e-5


def test_add_zero_is_identity_and_shape_mismatch_raises():
    x = np.random.default_rng(10).standard_normal((2, 3)).astype(np.float32)
    np.testing.assert_array_equal(tt.add(T(x), T(np.zeros((2, 3)))).data, x)
    with pytest.raises(ShapeError):
        tt.add(T(np.ones((2, 3))), T(np.ones((3, 2))))


# ---------------------------------------------------------------- channel groups


def test_slice_channels_index_arithmetic():
    x = T(np.arange(6).reshape(1, 6, 1, 1))
    assert tt.slice_channels(x, 0, 1).shape == (1, 6, 1, 1)
    # second of three groups (0-based index 1) holds channels 2 and 3
    assert tt.slice_channels(x, 1, 3).data.ravel().tolist() == [2.0, 3.0]
    with pytest.raises(ConfigError):
        tt.slice_channels(x, 0, 4)


@given(st.sampled_from([1, 2, 3, 4, 6, 12]), st.integers(0, 2**16))
def test_slice_concat_round_trip_is_bit_exact(groups, seed):
    x = np.random.default_rng(seed).standard_normal((2, 12, 3, 3)).astype(np.float32)
    parts = [tt.slice_channels(T(x), m, groups) for m in range(groups)]
    assert np.array_equal(tt.concat_channels(parts).data, x)


def test_slice_gradient_routes_to_its_channels():
    x = T(np.ones((1, 6, 2, 2)), grad=True)
    tt.backward(tt.tsum(tt.slice_channels(x, 2, 3)))
    assert x.grad[:, 4:].sum() == 8 and x.grad[:, :4].sum() == 0


# ---------------------------------------------------------------- backward


def test_backward_linear_and_quadratic():
    x = T([1.0, 2.0], grad=True)
    tt.backward(tt.tsum(x))
    assert x.grad.tolist() == [1.0, 1.0]
    y = T([1.0, 2.0], grad=True)
    tt.backward(tt.tsum(tt.mul(y, y)))
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_needs_scalar():
    with pytest.raises(ShapeError, match="scalar"):
        tt.backward(tt.mul(T([1.0, 2.0], grad=True), 2.0))


def test_unreached_leaf_gets_zero_gradient():
    a, b = T([1.0], grad=True), T([[3.0, 4.0]], grad=True)
    tt.backward(tt.tsum(tt.mul(a, 2.0)), [a, b])
    assert b.grad.tolist() == [[0.0, 0.0]]


def test_tape_is_topological_and_visits_each_node_once():
    x = T(np.ones((2, 2)), grad=True)
    y = tt.mul(x, x)
    z = tt.add(y, y)  # y is shared
    loss = tt.tsum(tt.add(z, y))
    tape = tt.backward(loss)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        if node._ctx is not None:
            for p in node._ctx[1]:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
    np.testing.assert_array_equal(x.grad, 6 * np.ones((2, 2)))


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
def test_backward_is_linear_in_the_loss(a, b, seed):
    x0 = np.random.default_rng(seed).uniform(-2, 2, (3, 4))

    def grad_of(build):
        with tt.default_dtype(np.float64):
            x = Tensor(x0.copy(), requires_grad=True)
            tt.backward(build(x))
            return x.grad

    f = lambda x: tt.tsum(tt.mul(x, x))  # noqa: E731
    g = lambda x: tt.tsum(tt.sigmoid(x))  # noqa: E731
    combined = grad_of(lambda x: tt.add(tt.mul(f(x), a), tt.mul(g(x), b)))
    np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), atol=1e-10)


def test_values_stay_finite():
    x = T(np.random.default_rng(11).uniform(-80, 80, (4, 5)))
    assert np.isfinite(tt.sigmoid(x).data).all()
    assert np.isfinite(tt.cross_entropy(T(np.array([[1000.0, -1000.0]])), [1]).data).all()


# ---------------------------------------------------------------- op gradients


rng = np.random.default_rng(12)
OP_CASES = {
    "add": (lambda a, b: tt.add(a, b), rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (1, 3))),
    "mul": (lambda a, b: tt.mul(a, b), rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (2, 3))),
    "sub": (lambda a, b: tt.sub(a, b), rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (2, 1))),
    "sigmoid": (lambda a: tt.sigmoid(a), rng.uniform(-3, 3, (3, 3))),
    "matmul": (lambda a, b: tt.matmul(a, b), rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (2, 4, 2))),
    "einsum": (lambda a, b: tt.einsum("nchw,nchwk->nhwk", a, b), rng.uniform(-1, 1, (1, 2, 2, 3)), rng.uniform(-1, 1, (1, 2, 2, 3, 3))),
    "conv": (lambda x, w: tt.conv2d(x, w, stride=2, padding=1), rng.uniform(-2, 2, (2, 2, 5, 5)), rng.uniform(-1, 1, (3, 2, 3, 3))),
    "conv_dilated": (lambda x, w: tt.conv2d(x, w, padding=2, dilation=2), rng.uniform(-2, 2, (1, 2, 4, 4)), rng.uniform(-1, 1, (2, 2, 3, 3))),
    "conv_grouped": (lambda x, w: tt.conv2d(x, w, padding=1, groups=2), rng.uniform(-2, 2, (1, 4, 4, 4)), rng.uniform(-1, 1, (4, 2, 3, 3))),
    "depthwise": (lambda x, w: tt.depthwise_conv2d(x, w, padding=1), rng.uniform(-2, 2, (2, 3, 4, 4)), rng.uniform(-1, 1, (3, 1, 3, 3))),
    "batchnorm": (
        lambda x, g, b: tt.batchnorm(x, g, b, np.zeros(3), np.ones(3), True),
        rng.uniform(-2, 2, (4, 3, 2, 2)),
        rng.uniform(0.5, 1.5, 3),
        rng.uniform(-1, 1, 3),
    ),
    "avg_pool": (lambda x: tt.avg_pool2d(x, 3, 2, 1), rng.uniform(-2, 2, (1, 2, 5, 5))),
    # distinct values keep the arg-max away from ties under +-h
    "max_pool": (lambda x: tt.max_pool2d(x, 2, 2, 0), rng.permutation(32).reshape(1, 2, 4, 4) * 0.1),
    "slice_concat": (lambda x: tt.concat_channels([tt.slice_channels(x, 1, 2), tt.slice_channels(x, 0, 2)]), rng.uniform(-1, 1, (1, 4, 2, 2))),
    "mean": (lambda x: tt.tmean(x, axis=(2, 3)), rng.uniform(-1, 1, (2, 3, 2, 2))),
    "transpose": (lambda x: tt.transpose(x, (1, 0, 2)), rng.uniform(-1, 1, (2, 3, 4))),
    "cross_entropy": (lambda z: tt.cross_entropy(z, [0, 2]), rng.uniform(-2, 2, (2, 3))),
    "lif_relaxed": (lambda x: lif_sequence(x, LIFParams(mode=RELAXED)), rng.uniform(0, 3, (3, 2, 4))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_central_differences(name):
    fn, *arrays = OP_CASES[name]
    errors = grad_errors(fn, *arrays)
    assert max(errors) <= 1e-3, (name, errors)


@settings(max_examples=25)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 5), st.sampled_from([1, 3]), st.integers(0, 2**16))
def test_conv_gradient_property(n, c, hw, k, seed):
    r = np.random.default_rng(seed)
    x, w = r.uniform(-2, 2, (n, c, hw, hw)), r.uniform(-1, 1, (2, c, k, k))
    assert max(grad_errors(lambda a, b: tt.conv2d(a, b, padding=k // 2), x, w)) <= 1e-3


def test_two_layer_conv_net_gradients_in_relaxed_mode():
    r = np.random.default_rng(13)
    x = r.uniform(0, 2, (2, 2, 1, 5, 5))  # [T, B, C, H, W]
    w1, w2 = r.uniform(-1, 1, (3, 1, 3, 3)), r.uniform(-1, 1, (2, 3, 3, 3))
    p = LIFParams(mode=RELAXED)

    def net(x, w1, w2):
        t, b = x.shape[:2]
        h = tt.conv2d(x.reshape(t * b, 1, 5, 5), w1, padding=1)
        s = lif_sequence(h.reshape(t, b, 3, 5, 5), p)
        return tt.conv2d(s.reshape(t * b, 3, 5, 5), w2, padding=1)

    assert max(grad_errors(net, x, w1, w2)) <= 1e-3
