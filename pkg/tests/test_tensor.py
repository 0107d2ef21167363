import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dotcnet import tensor as T
from dotcnet.errors import ConfigError, ShapeError

from gradutil import probe_gradients
from oracles import (central_difference, conv2d_loop, matmul_loop, max_relative_error, partition_mean_loop,
                     rotate_index_map, softmax_pixel, zpool_loop)

rng = np.random.default_rng(1234)


# ---------------------------------------------------------------- conv2d

def test_conv_delta_kernel_is_identity():
    x = rng.standard_normal((2, 1, 9, 7))
    w = np.zeros((1, 1, 5, 5))
    w[0, 0, 2, 2] = 1.0
    np.testing.assert_allclose(T.conv2d(x, w).data, x, atol=1e-14)


def test_conv_constant_input_all_ones_kernel():
    out = T.conv2d(np.full((1, 1, 6, 6), 0.7), np.ones((1, 1, 3, 3))).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * 0.7, rtol=1e-14)
    # zero padding: corners see 4 pixels
    assert out[0, 0, 0, 0] == pytest.approx(4 * 0.7)


def test_conv_matches_nested_loop_oracle():
    x = rng.standard_normal((1, 1, 5, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    np.testing.assert_allclose(T.conv2d(x, w).data, conv2d_loop(x, w), rtol=0, atol=1e-12)


def test_conv_multichannel_with_bias_matches_oracle():
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 5, 5))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(T.conv2d(x, w, b).data, conv2d_loop(x, w, b), atol=1e-12)


def test_conv_kernel_wider_than_map():
    x = rng.standard_normal((1, 2, 8, 2))
    w = rng.standard_normal((1, 2, 3, 3))
    np.testing.assert_allclose(T.conv2d(x, w).data, conv2d_loop(x, w), atol=1e-12)


def test_conv_errors():
    with pytest.raises(ConfigError):
        T.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ConfigError):
        T.conv2d(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 4, 4)))


def test_conv_linearity():
    x, y = rng.standard_normal((2, 1, 2, 10, 10))
    w = rng.standard_normal((3, 2, 7, 7))
    a, b = 1.7, -0.4
    lhs = T.conv2d(a * x + b * y, w).data
    rhs = a * T.conv2d(x, w).data + b * T.conv2d(y, w).data
    assert np.abs(lhs - rhs).max() < 1e-10


def test_conv_output_is_single_precision_for_single_inputs():
    out = T.conv2d(np.ones((1, 1, 8, 8), np.float32), np.ones((2, 1, 3, 3), np.float32))
    assert out.dtype == np.float32


# ---------------------------------------------------------------- rotate90

def test_rotate_shape_law():
    x = np.zeros((12, 32, 48))
    assert T.rotate90(x, "H").shape == (48, 32, 12)
    assert T.rotate90(x, "W").shape == (32, 12, 48)
    assert T.rotate90(np.zeros((2, 12, 32, 48)), "H").shape == (2, 48, 32, 12)


@pytest.mark.parametrize("axis", ["H", "W"])
def test_rotate_inverse_pair_bit_exact(axis):
    x = rng.standard_normal((3, 4, 5))
    back = T.rotate90(T.rotate90(x, axis), axis, clockwise=True).data
    assert back.shape == x.shape
    assert np.array_equal(back, x)


@pytest.mark.parametrize("axis", ["H", "W"])
def test_rotate_matches_index_map(axis):
    m = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    assert np.array_equal(T.rotate90(m, axis).data, rotate_index_map(m, axis))


def test_rotate_batch_axis_untouched():
    x = rng.standard_normal((3, 2, 3, 4))
    out = T.rotate90(x, "W").data
    for b in range(3):
        assert np.array_equal(out[b], rotate_index_map(x[b], "W"))


def test_rotate_rank_error():
    with pytest.raises(ShapeError):
        T.rotate90(np.zeros((4, 4)), "H")


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    out = T.channel_softmax(np.full((1, 4, 2, 2), 3.3)).data
    np.testing.assert_allclose(out, 0.25, rtol=1e-15)


def test_softmax_normalizes():
    out = T.channel_softmax(rng.standard_normal((3, 7, 5, 5)) * 5).data
    assert np.abs(out.sum(axis=1) - 1).max() < 1e-6
    assert (out > 0).all()


def test_softmax_reference_values():
    x = np.zeros((1, 3, 1, 1))
    x[0, 0] = 10.0
    out = T.channel_softmax(x).data[0, :, 0, 0]
    np.testing.assert_allclose(out, softmax_pixel([10.0, 0.0, 0.0]), atol=1e-12)
    np.testing.assert_allclose(out, [0.999909, 0.0000454, 0.0000454], atol=1e-6)


def test_softmax_overflow_safe():
    out = T.channel_softmax(np.array([1000.0, 999.0]).reshape(1, 2, 1, 1)).data
    assert np.all(np.isfinite(out))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 5, 3, 3), elements=st.floats(-30, 30)))
def test_softmax_preserves_argmax(x):
    out = T.channel_softmax(x).data
    # exact ties can map to equal outputs; only check pixels with a unique max
    top2 = np.sort(x, axis=1)[:, -2:]
    unique = top2[:, 1] - top2[:, 0] > 1e-9
    assert np.array_equal(out.argmax(axis=1)[unique], x.argmax(axis=1)[unique])


# ---------------------------------------------------------------- zpool

def test_zpool_pixel_example():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    assert T.channel_zpool(x).data.ravel().tolist() == [4.0, 2.5]


def test_zpool_constant():
    out = T.channel_zpool(np.full((2, 3, 4, 4), -1.25)).data
    assert np.all(out == -1.25)


def test_zpool_matches_loop_oracle():
    x = rng.standard_normal((1, 8, 4, 4))
    np.testing.assert_array_equal(T.channel_zpool(x).data[:, 0], zpool_loop(x)[:, 0])
    np.testing.assert_allclose(T.channel_zpool(x).data[:, 1], zpool_loop(x)[:, 1], rtol=1e-15)


def test_zpool_tie_routes_to_lowest_channel():
    x = T.Tensor(np.array([5.0, 1.0, 5.0]).reshape(1, 3, 1, 1), requires_grad=True)
    out = T.channel_zpool(x)
    T.backward(T.tsum(T.mul(out, T.Tensor(np.array([1.0, 0.0]).reshape(1, 2, 1, 1)))))
    assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0]


# ---------------------------------------------------------------- elementwise

def test_sigmoid_zero():
    assert T.sigmoid(np.zeros(3)).data.tolist() == [0.5, 0.5, 0.5]


def test_sigmoid_gradient_at_zero():
    x = T.Tensor(np.zeros(1), requires_grad=True)
    T.backward(T.tsum(T.sigmoid(x)))
    assert x.grad[0] == 0.25
    h = 1e-6
    fd = (1 / (1 + np.exp(-h)) - 1 / (1 + np.exp(h))) / (2 * h)
    assert abs(fd - x.grad[0]) < 1e-8


def test_multiply_by_ones_is_identity():
    x = rng.standard_normal((2, 3, 4, 4))
    assert np.array_equal(T.mul(x, np.ones_like(x)).data, x)


def test_channel_broadcast_multiply():
    x = rng.standard_normal((2, 3, 4, 4))
    g = rng.standard_normal((2, 1, 4, 4))
    np.testing.assert_array_equal(T.mul(x, g).data, x * g)


def test_elementwise_shape_errors():
    with pytest.raises(ShapeError):
        T.mul(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 4)))
    with pytest.raises(ShapeError):
        T.add(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3, 3)))


# ---------------------------------------------------------------- linear / concat / pool

def test_linear_identity_and_bias():
    x = rng.standard_normal((3, 4))
    assert np.array_equal(T.linear(x, np.eye(4), np.zeros(4)).data, x)
    b = rng.standard_normal(5)
    out = T.linear(x, np.zeros((4, 5)), b).data
    assert all(np.array_equal(row, b) for row in out)


def test_linear_matches_loop_matmul():
    x, w = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
    np.testing.assert_allclose(T.linear(x, w, np.zeros(4)).data, matmul_loop(x, w), atol=1e-12)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        T.linear(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))


def test_concat_shape_and_roundtrip():
    a, b = rng.standard_normal((2, 12, 5, 5)), rng.standard_normal((2, 12, 5, 5))
    out = T.concat_channels([a, b]).data
    assert out.shape == (2, 24, 5, 5)
    assert np.array_equal(out[:, :12], a) and np.array_equal(out[:, 12:], b)
    single = T.Tensor(a)
    assert T.concat_channels([single]) is single


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        T.concat_channels([np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 5))])


def test_pool_identity_and_constant():
    x = rng.standard_normal((1, 2, 6, 5))
    np.testing.assert_allclose(T.adaptive_avg_pool(x, (6, 5)).data, x, rtol=1e-15)
    np.testing.assert_allclose(T.adaptive_avg_pool(np.full((1, 1, 7, 9), 2.5), (3, 4)).data, 2.5, rtol=1e-15)


def test_pool_ramp_matches_partition_oracle():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = T.adaptive_avg_pool(x, (2, 2)).data
    np.testing.assert_array_equal(out, partition_mean_loop(x, 2, 2))
    assert out.ravel().tolist() == [2.5, 4.5, 10.5, 12.5]


def test_pool_uneven_partition():
    x = rng.standard_normal((2, 3, 7, 10))
    np.testing.assert_allclose(T.adaptive_avg_pool(x, (3, 4)).data, partition_mean_loop(x, 3, 4), atol=1e-14)


def test_pool_grid_too_large():
    with pytest.raises(ConfigError):
        T.adaptive_avg_pool(np.zeros((1, 1, 3, 3)), (4, 4))


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = T.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_square():
    xv = rng.standard_normal((4, 2))
    x = T.Tensor(xv, requires_grad=True)
    T.backward(T.scale(T.tsum(T.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, xv, rtol=1e-15)


def test_backward_accumulates_without_reset():
    x = T.Tensor(rng.standard_normal(3), requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    first = x.grad.copy()
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * first)


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.mul(x, x))


def test_graph_is_topological():
    x = T.Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    y = T.sigmoid(x)
    loss = T.tsum(T.add(y, T.mul(y, x)))
    graph = T.build_graph(loss)
    for i, node in enumerate(graph.nodes):
        for parent in node._parents:
            assert graph.index(parent) < i
    assert len({id(n) for n in graph.nodes}) == len(graph.nodes)


def test_shared_node_gradient_counts_each_path():
    # loss = sum(x*x + x): d/dx = 2x + 1, exercising fan-out
    xv = rng.standard_normal(5)
    x = T.Tensor(xv, requires_grad=True)
    T.backward(T.tsum(T.add(T.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, 2 * xv + 1)


def test_composite_graph_matches_finite_differences():
    from dotcnet.training import cross_entropy

    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.5
    lw = rng.standard_normal((3 * 36, 4)) * 0.3
    lb = rng.standard_normal(4) * 0.1
    labels = np.array([1, 3])

    def build(xt, wt, lwt, lbt):
        z = T.channel_softmax(T.sigmoid(T.conv2d(xt, wt)))
        return cross_entropy(T.linear(T.flatten(z), lwt, lbt), labels)

    params = [T.Tensor(a, requires_grad=True) for a in (x, w, lw, lb)]
    T.backward(build(*params))
    arrays = [x, w, lw, lb]
    for arr, p in zip(arrays, params):
        numeric = central_difference(lambda: build(*[T.Tensor(a) for a in arrays]).item(), arr, 1e-5)
        assert max_relative_error(p.grad, numeric) < 1e-4


PRIMITIVES = {
    "conv2d": (lambda x, w: T.conv2d(x, w), [(2, 2, 5, 6), (3, 2, 3, 3)], False),
    "conv2d_bias": (lambda x, w, b: T.conv2d(x, w, b), [(1, 2, 6, 6), (2, 2, 5, 5), (2,)], False),
    "rotate_H": (lambda x: T.rotate90(x, "H"), [(2, 3, 4, 5)], False),
    "rotate_W_cw": (lambda x: T.rotate90(x, "W", clockwise=True), [(2, 3, 4, 5)], False),
    "softmax": (T.channel_softmax, [(2, 4, 3, 3)], False),
    "zpool": (T.channel_zpool, [(2, 5, 3, 3)], False),
    "channel_sum": (T.channel_sum, [(2, 3, 4, 4)], False),
    "sigmoid": (T.sigmoid, [(2, 3, 3, 3)], False),
    "mul": (T.mul, [(2, 3, 3, 3), (2, 3, 3, 3)], False),
    "mul_broadcast": (T.mul, [(2, 3, 3, 3), (2, 1, 3, 3)], False),
    "add": (T.add, [(2, 3, 3, 3), (2, 3, 3, 3)], False),
    "scale": (lambda x: T.scale(x, -2.5), [(3, 4)], False),
    "linear": (T.linear, [(3, 4), (4, 5), (5,)], False),
    "concat": (lambda a, b: T.concat_channels([a, b]), [(2, 2, 3, 3), (2, 3, 3, 3)], False),
    "pool": (lambda x: T.adaptive_avg_pool(x, (2, 3)), [(2, 2, 5, 7)], False),
    "flatten": (T.flatten, [(2, 3, 2, 2)], False),
    "l2_normalize": (T.l2_normalize, [(3, 6)], False),
    "mean": (T.mean, [(3, 6)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_on_100_probes(name):
    op, shapes, positive = PRIMITIVES[name]
    errors = probe_gradients(op, shapes, probes=100, seed=hash(name) % 1000, positive=positive)
    assert errors.max() < 1e-4


def test_forward_determinism():
    x = rng.standard_normal((2, 3, 12, 12))
    w = rng.standard_normal((4, 3, 7, 7))
    a = T.channel_softmax(T.conv2d(x, w)).data
    b = T.channel_softmax(T.conv2d(x.copy(), w.copy())).data
    assert a.tobytes() == b.tobytes()


def test_finite_outputs_on_finite_inputs():
    x = rng.standard_normal((1, 3, 8, 8)) * 50
    for out in (T.sigmoid(x), T.channel_softmax(x), T.channel_zpool(x), T.conv2d(x, np.ones((2, 3, 3, 3)))):
        assert np.all(np.isfinite(out.data))
