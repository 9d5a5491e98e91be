"""Primitive operations: worked examples, error paths, and properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drnkit import ops
from drnkit.ctc import ctc_loss
from drnkit.ops import DegenerateBatchError
from drnkit.rng import Rng
from drnkit.tensor import ShapeMismatchError, Tape, Tensor, backward


def t(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


class TestConv2d:
    def test_shape_28x28_same(self):
        out = ops.conv2d(t(np.zeros((1, 1, 28, 28))), t(np.zeros((1, 1, 3, 3))),
                         stride=(1, 1), padding=(1, 1))
        assert out.shape == (1, 1, 28, 28)

    def test_shape_strided_5x5(self):
        out = ops.conv2d(t(np.zeros((1, 16, 32, 280))), t(np.zeros((16, 16, 5, 5))),
                         stride=(2, 2), padding=(2, 2))
        assert out.shape == (1, 16, 16, 140)

    def test_1x1_scalar_scaling(self):
        x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = t(np.full((1, 1, 1, 1), 2.0))
        out = ops.conv2d(x, w)
        np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])

    def test_channel_mismatch_names_dimensions(self):
        with pytest.raises(ShapeMismatchError, match="3 channels.*expects 4"):
            ops.conv2d(t(np.zeros((1, 3, 8, 8))), t(np.zeros((2, 4, 3, 3))))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeMismatchError, match="exceeds padded input"):
            ops.conv2d(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 7, 7))), padding=(1, 1))

    @given(
        h=st.integers(1, 40),
        k=st.integers(1, 7),
        s=st.integers(1, 3),
        p=st.integers(0, 3),
    )
    @settings(max_examples=60, deadline=None)
    def test_shape_law(self, h, k, s, p):
        if k > h + 2 * p:
            return
        out = ops.conv2d(t(np.zeros((1, 1, h, h))), t(np.zeros((1, 1, k, k))),
                         stride=(s, s), padding=(p, p))
        expect = (h + 2 * p - k) // s + 1
        assert out.shape == (1, 1, expect, expect)


class TestDepthwiseSeparable:
    def test_identity_kernels(self):
        x = t(np.random.default_rng(0).random((1, 3, 5, 5)))
        dw = np.zeros((3, 1, 3, 3), dtype=np.float32)
        dw[:, 0, 1, 1] = 1.0  # center tap
        pw = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        out = ops.depthwise_separable_conv(x, t(dw), t(pw), padding=(1, 1))
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_matches_composed_conv_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 4, 4))
        dw = rng.standard_normal((2, 1, 3, 3))
        pw = rng.standard_normal((5, 2, 1, 1))
        bias = rng.standard_normal(5)
        out = ops.depthwise_separable_conv(
            t(x, np.float64), t(dw, np.float64), t(pw, np.float64), t(bias, np.float64),
            stride=(1, 1), padding=(1, 1),
        )
        # oracle: grouped per-channel convs, then a plain 1x1 conv
        mids = [
            ops.conv2d(t(x[:, c : c + 1], np.float64), t(dw[c : c + 1], np.float64),
                       padding=(1, 1)).data
            for c in range(2)
        ]
        composed = ops.conv2d(t(np.concatenate(mids, axis=1), np.float64),
                              t(pw, np.float64), t(bias, np.float64))
        np.testing.assert_allclose(out.data, composed.data, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError, match="depthwise weight"):
            ops.depthwise_separable_conv(
                t(np.zeros((1, 3, 4, 4))), t(np.zeros((2, 1, 3, 3))),
                t(np.zeros((4, 3, 1, 1))),
            )


class TestBatchNorm:
    def test_two_value_channel(self):
        x = t(np.array([1.0, 3.0]).reshape(2, 1, 1, 1), np.float64)
        out = ops.batch_norm(x, t([1.0], np.float64), t([0.0], np.float64),
                             np.zeros(1), np.ones(1), training=True, eps=1e-12)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-5)

    def test_infer_identity_stats(self):
        x = t(np.random.default_rng(0).random((2, 3, 4, 4)))
        out = ops.batch_norm(x, t(np.ones(3)), t(np.zeros(3)),
                             np.zeros(3, np.float32), np.ones(3, np.float32),
                             training=False, eps=1e-5)
        np.testing.assert_allclose(out.data, x.data, atol=1e-4)

    def test_train_output_statistics(self):
        x = t(np.random.default_rng(7).standard_normal((8, 4, 6, 6)) * 3 + 1)
        out = ops.batch_norm(x, t(np.ones(4)), t(np.zeros(4)),
                             np.zeros(4, np.float32), np.ones(4, np.float32),
                             training=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1).max() < 1e-3

    def test_running_stats_update_rule(self):
        x = t(np.random.default_rng(0).random((4, 2, 3, 3)))
        rm = np.full(2, 10.0, np.float32)
        rv = np.full(2, 4.0, np.float32)
        batch_mean = x.data.mean(axis=(0, 2, 3))
        batch_var = x.data.var(axis=(0, 2, 3))
        ops.batch_norm(x, t(np.ones(2)), t(np.zeros(2)), rm, rv, training=True,
                       momentum=0.25)
        np.testing.assert_allclose(rm, 0.75 * 10.0 + 0.25 * batch_mean, rtol=1e-6)
        np.testing.assert_allclose(rv, 0.75 * 4.0 + 0.25 * batch_var, rtol=1e-6)

    def test_degenerate_batch(self):
        x = t(np.zeros((1, 2, 1, 1)))
        with pytest.raises(DegenerateBatchError):
            ops.batch_norm(x, t(np.ones(2)), t(np.zeros(2)),
                           np.zeros(2, np.float32), np.ones(2, np.float32),
                           training=True)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(ops.relu(t([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_positive_identity(self):
        x = t([0.5, 1.5, 9.0])
        np.testing.assert_array_equal(ops.relu(x).data, x.data)

    def test_subgradient(self):
        for value, expect in ((3.0, 1.0), (-3.0, 0.0), (0.0, 0.0)):
            x = Tensor(np.asarray([value]), requires_grad=True)
            with Tape() as tape:
                loss = ops.reduce_sum(ops.relu(x))
            backward(loss, tape)
            assert x.grad[0] == expect


class TestConcatAndSum:
    def test_concat_channel_count(self):
        out = ops.concat_channels([t(np.zeros((1, 16, 8, 8))), t(np.zeros((1, 12, 8, 8)))])
        assert out.shape == (1, 28, 8, 8)

    def test_concat_single_identity(self):
        x = t(np.random.default_rng(0).random((1, 3, 2, 2)))
        np.testing.assert_array_equal(ops.concat_channels([x]).data, x.data)

    def test_concat_slice_recovers_first_input(self):
        a = t(np.random.default_rng(1).random((2, 16, 4, 4)))
        b = t(np.random.default_rng(2).random((2, 8, 4, 4)))
        out = ops.concat_channels([a, b])
        np.testing.assert_array_equal(out.data[:, :16], a.data)

    def test_concat_extent_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            ops.concat_channels([t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 2, 5, 4)))])

    def test_sum_values(self):
        out = ops.sum_features([t([1.0, 2.0]), t([3.0, 4.0])])
        np.testing.assert_array_equal(out.data, [4, 6])

    def test_sum_single_identity(self):
        x = t([5.0, 6.0])
        np.testing.assert_array_equal(ops.sum_features([x]).data, x.data)

    def test_sum_additive_inverse(self):
        x = t(np.random.default_rng(0).random((2, 3)))
        neg = t(-x.data)
        np.testing.assert_array_equal(ops.sum_features([x, neg]).data, np.zeros((2, 3)))

    def test_sum_empty_rejected(self):
        with pytest.raises(ShapeMismatchError):
            ops.sum_features([])


class TestFullyConnected:
    def test_identity(self):
        x = t(np.random.default_rng(0).random((3, 4)))
        out = ops.fully_connected(x, t(np.eye(4)), t(np.zeros(4)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_worked_example(self):
        out = ops.fully_connected(t([[1.0, 1.0]]), t([[1.0], [1.0]]), t([0.0]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_weight_gradient_is_outer_product(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        with Tape() as tape:
            loss = ops.reduce_sum(ops.fully_connected(x, w, b))
        backward(loss, tape)
        upstream = np.ones((3, 2))
        np.testing.assert_allclose(w.grad, x.data.T @ upstream, rtol=1e-12)


class TestSoftmaxXent:
    def test_uniform_two_way(self):
        loss, probs = ops.softmax_xent(t([[0.0, 0.0]], np.float64), [0])
        np.testing.assert_allclose(probs.data, [[0.5, 0.5]])
        np.testing.assert_allclose(loss.item(), np.log(2), rtol=1e-12)

    def test_ln2_logit(self):
        _, probs = ops.softmax_xent(t([[np.log(2), 0.0]], np.float64), [0])
        np.testing.assert_allclose(probs.data, [[2 / 3, 1 / 3]], rtol=1e-12)

    def test_gradient_is_probs_minus_onehot(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        with Tape() as tape:
            loss, probs = ops.softmax_xent(x, [1, 0, 4, 2])
        backward(loss, tape)
        onehot = np.zeros((4, 5))
        onehot[np.arange(4), [1, 0, 4, 2]] = 1
        np.testing.assert_allclose(x.grad, (probs.data - onehot) / 4, atol=1e-12)
        assert np.abs(x.grad.sum(axis=1)).max() < 1e-12

    def test_rows_sum_to_one_per_frame(self):
        x = t(np.random.default_rng(1).standard_normal((2, 7, 4)))
        _, probs = ops.softmax_xent(x, np.zeros(14, dtype=int))
        np.testing.assert_allclose(probs.data.sum(axis=-1), np.ones((2, 7)), atol=1e-6)

    def test_loss_nonnegative(self):
        x = t(np.random.default_rng(2).standard_normal((8, 3)))
        loss, _ = ops.softmax_xent(x, np.random.default_rng(3).integers(0, 3, 8))
        assert loss.item() >= 0

    def test_out_of_range_target(self):
        with pytest.raises(ValueError, match="out of range"):
            ops.softmax_xent(t(np.zeros((2, 3))), [0, 3])


class TestDropout:
    def test_infer_is_identity(self):
        x = t(np.random.default_rng(0).random((4, 4)))
        out = ops.dropout(x, 0.7, training=False, rng=Rng(0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_rate_zero_train_identity(self):
        x = t(np.random.default_rng(0).random((4, 4)))
        out = ops.dropout(x, 0.0, training=True, rng=Rng(0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_inverted_scaling_preserves_mean(self):
        x = t(np.ones(100_000))
        out = ops.dropout(x, 0.5, training=True, rng=Rng(11))
        assert abs(out.data.mean() - 1.0) < 0.01

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            ops.dropout(t([1.0]), 1.0, training=True, rng=Rng(0))

    def test_survivor_scale(self):
        x = t(np.ones(1000))
        out = ops.dropout(x, 0.25, training=True, rng=Rng(3))
        survivors = out.data[out.data != 0]
        np.testing.assert_allclose(survivors, 1 / 0.75, rtol=1e-6)


class TestCtcAsTapeOp:
    def test_loss_flows_to_logits(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ctc_loss(logits, [(1, 2), (2,)])
        backward(loss, tape)
        assert logits.grad.shape == (2, 4, 3)
        # gradient rows sum to zero: propagated through the soft-max
        assert np.abs(logits.grad.sum(axis=-1)).max() < 1e-10
