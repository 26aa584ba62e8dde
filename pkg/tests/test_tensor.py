import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tmcnet import tensor as T
from tmcnet.tensor import DomainError, GraphError, ShapeError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv(x, w, stride, pad):
    C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(patch * w[o])
    return out


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    eye = np.eye(2)
    np.testing.assert_array_equal(T.matmul(Tensor(eye), Tensor(eye)).data, eye)


def test_matmul_hand_example_matches_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0], [1.0]])
    out = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_array_equal(out, [[2.0], [4.0]])
    np.testing.assert_array_equal(out, naive_matmul(a, b))


def test_matmul_random_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))
    assert "(3, 4)" in str(exc.value) and "(5, 2)" in str(exc.value)


def test_matmul_backward_closed_form():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    T.tsum(T.mul(T.matmul(a, b), Tensor(g))).backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


# ----------------------------------------------------------------- softmax

def test_softmax_symmetric_row():
    np.testing.assert_array_equal(T.softmax_rows(Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])


def test_softmax_large_values_do_not_overflow():
    out = T.softmax_rows(Tensor(np.full((1, 3), 1000.0))).data
    np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], rtol=1e-15)


def test_softmax_closed_form():
    out = T.softmax_rows(Tensor(np.array([[0.0, math.log(3.0)]]))).data
    np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_masked_softmax_gives_zero_weight_to_masked_keys():
    keep = np.array([[True, True, False]])
    out = T.softmax(T.masked_fill(Tensor(np.ones((2, 3))), keep, -np.inf)).data
    np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]] * 2)


# ------------------------------------------------------------- elementwise

def test_sigmoid_at_zero_is_exactly_half():
    assert T.sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]


def test_sigmoid_gradient_at_zero():
    x = leaf([0.0])
    T.tsum(T.sigmoid(x)).backward()
    assert x.grad[0] == 0.25


def test_sigmoid_extreme_inputs_stay_finite():
    out = T.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(out))


def test_log_of_one_is_zero():
    assert T.log(Tensor(np.ones(2))).data.tolist() == [0.0, 0.0]


def test_log_domain_error_names_index():
    with pytest.raises(DomainError) as exc:
        T.log(Tensor(np.array([[1.0, 2.0], [0.0, 3.0]])))
    assert "(1, 0)" in str(exc.value)


def test_elementwise_dispatch():
    x = Tensor(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(T.elementwise("relu", x).data, [0.0, 2.0])
    np.testing.assert_array_equal(T.elementwise("scale", x, c=3.0).data, [-3.0, 6.0])
    np.testing.assert_array_equal(T.elementwise("add", x, x).data, [-2.0, 4.0])
    with pytest.raises(KeyError):
        T.elementwise("tanh", x)


def test_broadcast_restricted_to_scalar_and_trailing_shape():
    a = Tensor(np.ones((2, 3)))
    T.add(a, Tensor(np.ones(1)))
    T.add(Tensor(np.ones((4, 2, 3))), a)
    with pytest.raises(ShapeError):
        T.add(a, Tensor(np.ones((2, 1))))


# -------------------------------------------------------------------- conv

def test_conv_1x1_unit_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 5, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data
    np.testing.assert_array_equal(out, x)


def test_conv_all_ones_sum():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 9.0


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2)])
def test_conv_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(k + stride)
    x, w = rng.standard_normal((2, 8, 8)), rng.standard_normal((3, 2, k, k))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data,
                               naive_conv(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((3, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3))
    batched = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], T.conv2d(Tensor(x[b]), Tensor(w), pad=1).data, rtol=1e-12)


def test_conv_non_integral_extent_raises():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=2)


# ---------------------------------------------------------------- spatial

def test_upsample2x_values():
    np.testing.assert_array_equal(T.upsample2x(Tensor(np.ones((1, 1, 1)))).data, np.ones((1, 2, 2)))
    checker = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    expected = np.kron(checker[0], np.ones((2, 2)))[None]
    np.testing.assert_array_equal(T.upsample2x(Tensor(checker)).data, expected)


def test_upsample2x_grad_of_sum_is_four():
    x = leaf(np.random.default_rng(0).standard_normal((2, 3, 3)))
    T.tsum(T.upsample2x(x)).backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 3, 3), 4.0))


def test_concat_channels_singleton_and_order():
    a = Tensor(np.random.default_rng(0).standard_normal((2, 2, 2)))
    np.testing.assert_array_equal(T.concat_channels([a]).data, a.data)
    out = T.concat_channels([Tensor(np.zeros((1, 2, 2))), Tensor(np.ones((1, 2, 2)))]).data
    assert np.all(out[0] == 0) and np.all(out[1] == 1)


def test_concat_channels_spatial_mismatch_names_part():
    with pytest.raises(ShapeError) as exc:
        T.concat_channels([Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 2)))])
    assert "part 2" in str(exc.value)


def test_concat_then_slice_round_trip_is_identity_on_grads():
    rng = np.random.default_rng(5)
    parts = [leaf(rng.standard_normal((c, 3, 3))) for c in (1, 2, 3)]
    cat = T.concat_channels(parts)
    g = rng.standard_normal(cat.shape)
    T.tsum(T.mul(cat, Tensor(g))).backward()
    np.testing.assert_array_equal(parts[0].grad, g[0:1])
    np.testing.assert_array_equal(parts[1].grad, g[1:3])
    np.testing.assert_array_equal(parts[2].grad, g[3:6])
    back = [T.getitem(cat.detach(), (slice(a, b),)).data for a, b in ((0, 1), (1, 3), (3, 6))]
    for p, v in zip(parts, back):
        np.testing.assert_array_equal(p.data, v)


def test_global_avg_pool():
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(np.array([[1.0, 2.0]]))).data, [[1.0, 2.0]])
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(np.array([[0.0, 2.0], [2.0, 0.0]]))).data, [[1.0, 1.0]])
    x = leaf(np.ones((5, 3)))
    T.tsum(T.global_avg_pool(x)).backward()
    np.testing.assert_allclose(x.grad, np.full((5, 3), 0.2))
    with pytest.raises(ShapeError):
        T.global_avg_pool(Tensor(np.zeros((0, 3))))


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = leaf(np.zeros((2, 3, 4)))
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square_gives_2x():
    x = leaf([1.0, 2.0, 3.0])
    T.tsum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_twice_raises():
    x = leaf([1.0, 2.0])
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_non_scalar_seed_raises():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        T.mul(x, x).backward()


def test_shared_node_gradient_accumulates():
    x = leaf([3.0])
    y = T.mul(x, x)
    T.tsum(T.add(y, y)).backward()
    assert x.grad[0] == 12.0


def test_deep_chain_does_not_hit_recursion_limit():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = T.scale(y, 1.0)
    T.tsum(y).backward()
    assert x.grad[0] == 1.0


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(7)
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))

    def run():
        y = T.conv2d(Tensor(x), Tensor(w), pad=1)
        return T.softmax(T.layer_norm(y, Tensor(np.ones(8)), Tensor(np.zeros(8)))).data

    assert run().tobytes() == run().tobytes()


def test_dump_and_load(tmp_path):
    x = np.random.default_rng(0).standard_normal((2, 3))
    T.dump_tensor(Tensor(x), tmp_path / "t.txt")
    assert (tmp_path / "t.txt").read_text().startswith("shape: 2 3\n")
    np.testing.assert_array_equal(T.load_tensor(tmp_path / "t.txt"), x)
