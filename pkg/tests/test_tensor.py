import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from streamnet import tensor as T
from streamnet.errors import NonFiniteError, ShapeError, SpatialCollapseError


def direct_conv(x, k, b, pad):
    """Plain loops over every index: the reference for conv2d."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    (p0, p1), (q0, q1) = pad
    xp = np.zeros((n, cin, h + p0 + p1, w + q0 + q1))
    xp[:, :, p0:p0 + h, q0:q0 + w] = x
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    s = b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[a, c, i + u, j + v] * k[o, c, u, v]
                    out[a, o, i, j] = s
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = T.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1), "same")
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_valid(self):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1), "valid")
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    @pytest.mark.parametrize("ksize", [(3, 3), (2, 2), (1, 1), (3, 2)])
    def test_matches_direct_summation(self, rng, ksize):
        x = rng.normal(size=(2, 3, 8, 8))
        k = rng.normal(size=(4, 3, *ksize))
        b = rng.normal(size=4)
        got = T.conv2d(x, k, b, "same").data
        pad = tuple(((s - 1) // 2, s - 1 - (s - 1) // 2) for s in ksize)
        want = direct_conv(x, k, b, pad)
        assert got.shape == (2, 4, 8, 8)
        assert np.max(T.relative_error(got, want)) <= 1e-12

    def test_valid_matches_direct_summation(self, rng):
        x = rng.normal(size=(1, 2, 6, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        want = direct_conv(x, k, b, ((0, 0), (0, 0)))
        np.testing.assert_allclose(T.conv2d(x, k, b, "valid").data, want, rtol=1e-12, atol=1e-13)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="Cin"):
            T.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)), np.zeros(2))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="height"):
            T.conv2d(np.zeros((1, 1, 2, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1), "valid")


class TestMaxPool:
    def test_window_max(self):
        out = T.maxpool2x2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 4.0

    def test_constant(self):
        np.testing.assert_array_equal(T.maxpool2x2(np.full((2, 3, 6, 6), 0.7)).data, np.full((2, 3, 3, 3), 0.7))

    def test_windowed_max_oracle_odd_size(self, rng):
        x = rng.normal(size=(1, 3, 9, 9))
        out = T.maxpool2x2(x).data
        assert out.shape == (1, 3, 4, 4)
        want = np.empty((1, 3, 4, 4))
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    want[0, c, i, j] = max(x[0, c, 2 * i + u, 2 * j + v] for u in (0, 1) for v in (0, 1))
        np.testing.assert_array_equal(out, want)

    def test_tie_routes_to_first(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        T.maxpool2x2(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_dropped_row_gets_zero_gradient(self, rng):
        x = T.Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        T.maxpool2x2(x).sum().backward()
        assert np.all(x.grad[:, :, 2, :] == 0) and np.all(x.grad[:, :, :, 2] == 0)

    def test_spatial_collapse(self):
        with pytest.raises(SpatialCollapseError, match="spatial collapse"):
            T.maxpool2x2(np.zeros((1, 1, 1, 4)))


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        x = T.Tensor(-np.ones(5), requires_grad=True)
        out = T.relu(x)
        out.sum().backward()
        np.testing.assert_array_equal(out.data, 0.0)
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_zero_has_zero_subgradient(self):
        x = T.Tensor([0.0, 1.0], requires_grad=True)
        T.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_elementwise_oracle(self, rng):
        x = rng.normal(size=(4, 5, 3))
        np.testing.assert_array_equal(T.relu(x).data, np.vectorize(lambda v: v if v > 0 else 0.0)(x))


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(T.dense(x, np.eye(4), np.zeros(4)).data, x)

    def test_hand_arithmetic(self):
        np.testing.assert_array_equal(T.dense([[1.0, 2.0]], np.eye(2), [3.0, 3.0]).data, [[4.0, 5.0]])

    def test_triple_loop_oracle(self, rng):
        x, w, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3)), rng.normal(size=3)
        want = np.array([[b[k] + math.fsum(x[i, f] * w[f, k] for f in range(7)) for k in range(3)] for i in range(5)])
        assert np.max(T.relative_error(T.dense(x, w, b).data, want)) <= 1e-12

    def test_mismatch(self):
        with pytest.raises(ShapeError, match="F=3"):
            T.dense(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, p = T.softmax_cross_entropy(np.zeros((3, 10)), [0, 4, 9])
        np.testing.assert_allclose(p, 0.1, rtol=0, atol=1e-15)
        assert loss.item() == pytest.approx(math.log(10), abs=1e-14)

    def test_dominant_correct_logit(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1e6
        loss, _ = T.softmax_cross_entropy(logits, [2])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_high_precision_oracle(self, rng):
        logits = rng.normal(size=(6, 5)) * 3
        labels = rng.integers(0, 5, size=6)
        mpmath.mp.dps = 50
        want = sum(
            -mpmath.log(mpmath.exp(mpmath.mpf(row[y])) / mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row))
            for row, y in zip(logits, labels)
        ) / 6
        loss, _ = T.softmax_cross_entropy(logits, labels)
        assert abs(loss.item() - float(want)) <= 1e-13 * float(want)

    def test_gradient_is_p_minus_onehot_over_n(self, rng):
        logits = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        labels = np.array([0, 2, 1, 1])
        loss, p = T.softmax_cross_entropy(logits, labels)
        loss.backward()
        np.testing.assert_allclose(logits.grad, (p - np.eye(3)[labels]) / 4, rtol=1e-14, atol=1e-16)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            T.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)), st.lists(st.integers(0, 5), min_size=4, max_size=4))
    def test_rows_sum_to_one_and_loss_nonnegative(self, logits, labels):
        loss, p = T.softmax_cross_entropy(logits, labels)
        assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
        assert loss.item() >= 0.0


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_square_gives_x(self, rng):
        x = T.Tensor(rng.normal(size=(5,)), requires_grad=True)
        (0.5 * (x * x)).sum().backward()
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)

    def test_non_scalar_loss(self):
        with pytest.raises(ShapeError, match="scalar"):
            T.Tensor(np.ones(3), requires_grad=True).backward()

    def test_shared_node_accumulates(self, rng):
        x = T.Tensor(rng.normal(size=3), requires_grad=True)
        y = T.relu(x)
        (y + y).sum().backward()
        np.testing.assert_array_equal(x.grad, 2.0 * (x.data > 0))

    def test_gradient_shape_matches_value(self, rng):
        x = T.Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
        k = T.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = T.Tensor(np.zeros(4), requires_grad=True)
        T.flatten(T.maxpool2x2(T.relu(T.conv2d(x, k, b)))).sum().backward()
        for t in (x, k, b):
            assert t.grad.shape == t.shape

    def test_topological_order_parents_first(self, rng):
        x = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        loss = T.relu(x * 2.0).sum()
        order = T.topological_order(loss)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            assert all(pos[id(p)] < pos[id(node)] for p in node.parents)
        assert order[-1] is loss

    def test_non_finite_forward_is_an_error(self):
        with pytest.raises(NonFiniteError):
            T.dense([[1e308, 1e308]], [[10.0], [10.0]], [0.0])

    def test_no_grad_records_nothing(self, rng):
        x = T.Tensor(rng.normal(size=3), requires_grad=True)
        with T.no_grad():
            y = T.relu(x)
        assert not y.requires_grad and y.parents == ()


class TestFiniteDifference:
    def test_linear_loss_near_machine_precision(self, rng):
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        c = rng.normal(size=(3, 4))
        assert T.finite_difference_check(lambda: T.mul(x, c).sum(), x, 1e-3) < 1e-9

    def test_rejects_non_positive_epsilon(self):
        x = T.Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            T.finite_difference_check(lambda: x.sum(), x, 0.0)

    def test_parameter_restored(self, rng):
        x = T.Tensor(rng.normal(size=4), requires_grad=True)
        before = x.data.copy()
        T.finite_difference_check(lambda: (x * x).sum(), x)
        np.testing.assert_array_equal(x.data, before)

    def test_conv_pool_dense_chain(self, rng):
        x = rng.uniform(0.1, 1.0, size=(2, 2, 6, 6))
        k = T.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
        # fan-in scaling keeps the softmax away from saturation; a class with
        # probability ~1e-7 has gradients below the central-difference noise
        w = T.Tensor(rng.normal(size=(27, 4)) / np.sqrt(27), requires_grad=True)
        c = T.Tensor(np.zeros(4), requires_grad=True)
        labels = np.array([1, 3])

        def loss():
            h = T.flatten(T.maxpool2x2(T.relu(T.conv2d(x, k, b))))
            return T.softmax_cross_entropy(T.dense(h, w, c), labels)[0]

        for p in (k, b, w, c):
            assert T.finite_difference_check(loss, p, 1e-5) < 1e-4


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(2, 7), st.integers(2, 7)),
              elements=st.floats(-10, 10)))
def test_maxpool_and_relu_commute(x):
    np.testing.assert_array_equal(T.maxpool2x2(T.relu(x)).data, T.relu(T.maxpool2x2(x)).data)
