"""Kernel-level checks: forward values against analytic cases, backward
against central finite differences (float64, eps=1e-5, rel err < 1e-4)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_check
from vadforge import tensor as T
from vadforge.errors import DimensionError, ParameterError, UsageError

TOL = 1e-4


def t(data, grad=True):
    return T.tensor(np.asarray(data), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, t(np.eye(2)))
        assert np.allclose(out.data, [[1, 2], [3, 4]])

    def test_analytic_sum(self):
        a = t([[1.0, 1.0, 1.0]])
        b = t([[2.0], [3.0], [4.0]])
        assert np.allclose(T.matmul(a, b).data, [[9.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError) as e:
            T.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 5))))
        assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)

    def test_gradients(self, rng, f64):
        a = t(rng.standard_normal((3, 4)))
        b = t(rng.standard_normal((4, 2)))
        assert fd_check(lambda: T.tsum(T.matmul(a, b)), [a, b]) < TOL


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = t(rng.standard_normal((1, 6, 5)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = T.conv2d(x, t(k))
        assert np.allclose(out.data, x.data)

    def test_all_ones_interior(self):
        x = t(np.ones((1, 5, 5)))
        out = T.conv2d(x, t(np.ones((1, 1, 3, 3))))
        assert out.data[0, 2, 2] == pytest.approx(9.0)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(t(np.zeros((2, 4, 4))), t(np.zeros((1, 3, 3, 3))))

    def test_kernel_must_be_3x3(self):
        with pytest.raises(DimensionError):
            T.conv2d(t(np.zeros((1, 4, 4))), t(np.zeros((1, 1, 5, 5))))

    def test_same_pad_preserves_shape(self, rng):
        for h, w in [(1, 1), (2, 7), (16, 3)]:
            x = t(rng.standard_normal((2, h, w)))
            k = t(rng.standard_normal((3, 2, 3, 3)))
            assert T.conv2d(x, k).shape == (3, h, w)

    def test_gradients(self, rng, f64):
        x = t(rng.standard_normal((1, 5, 5)))
        k = t(rng.standard_normal((2, 1, 3, 3)))
        b = t(rng.standard_normal(2))
        assert fd_check(lambda: T.tsum(T.conv2d(x, k, b)), [x, k, b]) < TOL

    def test_gradients_valid_mode(self, rng, f64):
        x = t(rng.standard_normal((2, 5, 4)))
        k = t(rng.standard_normal((2, 2, 3, 3)))
        assert fd_check(
            lambda: T.tsum(T.conv2d(x, k, pad_same=False)), [x, k]) < TOL


class TestMaxPool:
    def test_max_of_pair(self):
        out = T.maxpool2d(t([[[3.0], [7.0]]]), (2, 1))
        assert out.data.tolist() == [[[7.0]]]

    def test_constant_halves_height(self):
        out = T.maxpool2d(t(np.full((2, 6, 3), 1.5)), (2, 1))
        assert out.shape == (2, 3, 3)
        assert np.all(out.data == 1.5)

    def test_odd_height_rejected(self):
        with pytest.raises(DimensionError):
            T.maxpool2d(t(np.zeros((1, 3, 2))), (2, 1))

    def test_tie_goes_to_first_index(self, f64):
        x = t([[[2.0], [2.0]]])
        out = T.maxpool2d(x, (2, 1))
        T.backward(T.tsum(out))
        assert x.grad[0, 0, 0] == 1.0 and x.grad[0, 1, 0] == 0.0

    def test_gradients(self, rng, f64):
        x = t(rng.standard_normal((2, 4, 3)))
        assert fd_check(lambda: T.tsum(T.maxpool2d(x, (2, 1))), [x]) < TOL


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(t([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3)

    @given(st.integers(1, 6), st.integers(1, 8))
    @settings(max_examples=25, deadline=None)
    def test_rows_sum_to_one_and_positive(self, rows, cols):
        x = np.random.default_rng(rows * 31 + cols).standard_normal((rows, cols)) * 5
        out = T.softmax(T.tensor(x)).data
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out > 0.0)

    def test_gradients(self, rng, f64):
        x = t(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))  # weighted sum exercises off-diagonal terms
        assert fd_check(
            lambda: T.tsum(T.mul(T.softmax(x), T.tensor(w))), [x]) < TOL


class TestPRelu:
    def test_definition(self):
        x = t([[1.0, -2.0], [0.0, -4.0]])
        a = t([0.25, 0.5])
        out = T.prelu(x, a, channel_axis=0)
        assert np.allclose(out.data, [[1.0, -0.5], [0.0, -2.0]])

    def test_gradients_both_axes(self, rng, f64):
        x = t(rng.standard_normal((3, 4, 5)))
        a = t(rng.uniform(0.1, 0.9, 3))
        assert fd_check(lambda: T.tsum(T.prelu(x, a, 0)), [x, a]) < TOL
        x2 = t(rng.standard_normal((6, 4)))
        a2 = t(rng.uniform(0.1, 0.9, 4))
        assert fd_check(lambda: T.tsum(T.prelu(x2, a2, 1)), [x2, a2]) < TOL


class TestLayerNorm:
    def test_normalizes_before_affine(self, rng):
        x = T.tensor(rng.standard_normal((5, 16)) * 3 + 2)
        out = T.layernorm(x, T.tensor(np.ones(16)), T.tensor(np.zeros(16)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-5
        assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-3)

    def test_gradients(self, rng, f64):
        x = t(rng.standard_normal((4, 6)))
        g = t(rng.uniform(0.5, 1.5, 6))
        b = t(rng.standard_normal(6))
        wt = rng.standard_normal((4, 6))
        assert fd_check(
            lambda: T.tsum(T.mul(T.layernorm(x, g, b), T.tensor(wt))),
            [x, g, b]) < TOL


class TestBatchNorm:
    def test_train_normalizes_and_updates_running_stats(self, rng):
        x = T.tensor(rng.standard_normal((2, 8, 8)) * 4 + 1)
        rm, rv = np.zeros(2), np.ones(2)
        out = T.batchnorm2d(x, T.tensor(np.ones(2)), T.tensor(np.zeros(2)),
                            rm, rv, training=True)
        assert np.abs(out.data.mean(axis=(1, 2))).max() < 1e-5
        assert not np.allclose(rm, 0.0)

    def test_eval_uses_running_stats(self, rng):
        x = T.tensor(rng.standard_normal((1, 4, 4)))
        rm, rv = np.full(1, 2.0), np.full(1, 4.0)
        out = T.batchnorm2d(x, T.tensor(np.ones(1)), T.tensor(np.zeros(1)),
                            rm, rv, training=False)
        assert np.allclose(out.data, (x.data - 2.0) / np.sqrt(4.0 + 1e-5),
                           atol=1e-6)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, f64, training):
        x = t(rng.standard_normal((2, 3, 4)))
        g = t(rng.uniform(0.5, 1.5, 2))
        b = t(rng.standard_normal(2))
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
        wt = rng.standard_normal((2, 3, 4))

        def loss():
            out = T.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training=training)
            return T.tsum(T.mul(out, T.tensor(wt)))
        assert fd_check(loss, [x, g, b]) < TOL


class TestDropout:
    def test_probability_range(self, rng):
        x = t(np.ones(4))
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ParameterError):
                T.dropout(x, bad, rng)

    def test_inactive_outside_training(self, rng):
        x = t(np.ones((3, 3)))
        out = T.dropout(x, 0.5, rng, training=False)
        assert np.array_equal(out.data, x.data)

    def test_inverted_scaling(self):
        x = T.tensor(np.ones(10000))
        out = T.dropout(x, 0.25, np.random.default_rng(0), training=True)
        kept = out.data[out.data != 0]
        assert np.allclose(kept, 1 / 0.75)
        assert abs(out.data.mean() - 1.0) < 0.05

    def test_gradients_fixed_mask(self, f64):
        x = t(np.random.default_rng(3).standard_normal(40))
        assert fd_check(
            lambda: T.tsum(T.dropout(x, 0.3, np.random.default_rng(7),
                                     training=True)), [x]) < TOL


class TestSigmoidAndFriends:
    def test_sigmoid_values(self):
        out = T.sigmoid(t([0.0, 100.0, -100.0]))
        assert np.allclose(out.data, [0.5, 1.0, 0.0], atol=1e-6)

    def test_gradients_elementwise_ops(self, rng, f64):
        for build in [
            lambda a, b: T.tsum(T.add(a, b)),
            lambda a, b: T.tsum(T.mul(a, b)),
        ]:
            a = t(rng.standard_normal((3, 4)))
            b = t(rng.standard_normal((3, 4)))
            assert fd_check(lambda: build(a, b), [a, b]) < TOL

    def test_gradients_bias_add(self, rng, f64):
        a = t(rng.standard_normal((5, 3)))
        b = t(rng.standard_normal(3))
        assert fd_check(lambda: T.tsum(T.add(a, b)), [a, b]) < TOL

    def test_gradients_linear(self, rng, f64):
        x = t(rng.standard_normal((4, 3)))
        w = t(rng.standard_normal((3, 2)))
        b = t(rng.standard_normal(2))
        assert fd_check(lambda: T.tsum(T.linear(x, w, b)), [x, w, b]) < TOL

    def test_gradients_structural(self, rng, f64):
        x = t(rng.standard_normal((2, 3, 4)))
        wt = rng.standard_normal((4, 6))

        def loss():
            y = T.transpose(x, (2, 0, 1))
            y = T.reshape(y, (4, 6))
            return T.tsum(T.mul(y, T.tensor(wt)))
        assert fd_check(loss, [x]) < TOL

    def test_gradients_concat_sigmoid_mean(self, rng, f64):
        a = t(rng.standard_normal((3, 2)))
        b = t(rng.standard_normal((3, 4)))
        assert fd_check(
            lambda: T.mean(T.sigmoid(T.concat([a, b], axis=-1))), [a, b]) < TOL

    def test_gradients_scale(self, rng, f64):
        a = t(rng.standard_normal((2, 5)))
        assert fd_check(lambda: T.tsum(T.scale(a, -1.7)), [a]) < TOL

    def test_gradients_bce_with_logits(self, rng, f64):
        z = t(rng.standard_normal(16) * 3)
        y = (rng.random(16) > 0.5).astype(np.float64)
        assert fd_check(lambda: T.bce_with_logits(z, y), [z]) < TOL


class TestBackward:
    def test_sum_gives_ones(self, rng):
        w = t(rng.standard_normal((3, 5)))
        T.backward(T.tsum(w))
        assert np.array_equal(w.grad, np.ones((3, 5), dtype=w.data.dtype))

    def test_half_sum_of_squares_gives_w(self, rng, f64):
        w = t(rng.standard_normal(7))
        T.backward(T.scale(T.tsum(T.mul(w, w)), 0.5))
        assert np.allclose(w.grad, w.data)

    def test_accumulation_without_zero_grad(self, rng):
        w = t(rng.standard_normal(4))
        T.backward(T.tsum(w))
        T.backward(T.tsum(w))
        assert np.allclose(w.grad, 2.0)

    def test_non_scalar_loss_rejected(self, rng):
        w = t(rng.standard_normal((2, 2)))
        with pytest.raises(UsageError):
            T.backward(T.add(w, w))

    def test_unreachable_tensor_untouched(self, rng):
        w = t(rng.standard_normal(3))
        other = t(rng.standard_normal(3))
        _ = T.tsum(other)  # on the tape but not part of the loss
        T.backward(T.tsum(w))
        assert other.grad is None

    def test_tape_cleared_after_backward(self, rng):
        w = t(rng.standard_normal(3))
        loss = T.tsum(w)
        assert len(T.active_tape()) > 0
        T.backward(loss)
        assert len(T.active_tape()) == 0

    def test_retain_allows_second_replay(self, rng):
        w = t(rng.standard_normal(3))
        loss = T.tsum(w)
        T.backward(loss, retain=True)
        w.zero_grad()
        loss.grad = None
        T.backward(loss)
        assert np.allclose(w.grad, 1.0)

    def test_no_grad_records_nothing(self, rng):
        w = t(rng.standard_normal(3))
        with T.no_grad():
            out = T.tsum(w)
        assert len(T.active_tape()) == 0
        assert not out.requires_grad

    def test_eval_forward_bit_identical(self, rng):
        x = T.tensor(rng.standard_normal((4, 8)))
        w = T.tensor(rng.standard_normal((8, 8)))
        with T.no_grad():
            a = T.softmax(T.matmul(x, w)).data
            b = T.softmax(T.matmul(x, w)).data
        assert np.array_equal(a, b)
