import math

import numpy as np
from django.test import SimpleTestCase

from app.core.exceptions import DomainError, TrainingError, UsageError
from .functional import (
    BatchNormState, attention_pool, batch_norm2d, conv2d_3x3, cross_entropy_loss, dropout,
    global_avg_pool_spatial, layer_norm, linear, relu, softmax,
)
from .optim import AdamState, adam_step
from .tensor import Parameter, Tensor, concat, reshape, transpose


def numeric_gradient(f, param, h=1e-6):
    grad = np.zeros_like(param.data)
    for idx in np.ndindex(param.shape):
        saved = param.data[idx]
        param.data[idx] = saved + h
        up = f()
        param.data[idx] = saved - h
        down = f()
        param.data[idx] = saved
        grad[idx] = (up - down) / (2 * h)
    return grad


class GradientCheckMixin:

    def assertGradientsMatch(self, build_loss, params):
        loss = build_loss()
        loss.backward()
        for p in params:
            analytic = p.grad.copy()
            numeric = numeric_gradient(lambda: build_loss().item(), p)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8, err_msg=p.name)
            p.zero_grad()


class TensorTests(GradientCheckMixin, SimpleTestCase):

    def test_sum_gradient_is_ones(self):
        x = Parameter(np.arange(6.0).reshape(2, 3), 'x')
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_broadcast_add_and_mul(self):
        a = Parameter(np.random.default_rng(0).normal(size=(3, 4)), 'a')
        b = Parameter(np.random.default_rng(1).normal(size=(4,)), 'b')
        self.assertGradientsMatch(lambda: ((a * b + b) * a).sum(), [a, b])

    def test_shape_ops(self):
        a = Parameter(np.random.default_rng(2).normal(size=(2, 3, 4)), 'a')
        weights = Tensor(np.random.default_rng(3).normal(size=(4, 2, 6)))
        self.assertGradientsMatch(
            lambda: (concat([transpose(a, (2, 0, 1)), reshape(a, (4, 2, 3))], axis=2) * weights).mean(),
            [a],
        )

    def test_reuse_after_mutation_is_rejected(self):
        w = Parameter(np.ones(3), 'w')
        loss = (w * w).sum()
        w.assign(np.full(3, 2.0))
        with self.assertRaises(UsageError):
            loss.backward()

    def test_second_backward_is_rejected(self):
        w = Parameter(np.ones(3), 'w')
        loss = (w * 3.0).sum()
        loss.backward()
        with self.assertRaises(UsageError):
            loss.backward()

    def test_backward_needs_parameters(self):
        with self.assertRaises(UsageError):
            Tensor(np.ones(2)).sum().backward()


class ConvolutionTests(GradientCheckMixin, SimpleTestCase):

    def test_zero_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 5)))
        out = conv2d_3x3(x, Tensor(np.zeros((4, 3, 3, 3))))
        self.assertEqual(out.shape, (2, 4, 4, 5))
        self.assertFalse(np.any(out.data))

    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 4, 5)))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d_3x3(x, Tensor(kernel)).data, x.data)

    def test_padding_sums(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d_3x3(x, Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_shape_mismatch(self):
        with self.assertRaises(DomainError):
            conv2d_3x3(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 3, 3, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x = Parameter(rng.normal(size=(2, 2, 3, 4)), 'x')
        w = Parameter(rng.normal(size=(3, 2, 3, 3)), 'w')
        weights = Tensor(rng.normal(size=(2, 3, 3, 4)))
        self.assertGradientsMatch(lambda: (conv2d_3x3(x, w) * weights).sum(), [x, w])


class NormalizationTests(GradientCheckMixin, SimpleTestCase):

    def test_train_mode_statistics(self):
        state = BatchNormState.create(3, 'bn')
        x = Tensor(np.random.default_rng(5).normal(2.0, 3.0, size=(4, 3, 5, 6)))
        var = x.data.var(axis=(0, 2, 3))
        out = batch_norm2d(x, state, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
        # eps keeps the normalised variance just below one
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + state.eps), rtol=1e-10)
        self.assertTrue(np.all(state.running_var >= 0))

    def test_constant_channel_maps_to_shift(self):
        state = BatchNormState.create(1, 'bn')
        state.shift.assign(np.array([0.25]))
        out = batch_norm2d(Tensor(np.full((2, 1, 2, 2), 7.0)), state, training=True)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-12)

    def test_eval_mode_uses_running_stats(self):
        state = BatchNormState.create(2, 'bn')
        x = np.random.default_rng(6).normal(size=(3, 2, 2, 2))
        out = batch_norm2d(Tensor(x), state, training=False)
        np.testing.assert_allclose(out.data, x / math.sqrt(1 + state.eps), rtol=1e-14)
        alone = batch_norm2d(Tensor(x[:1]), state, training=False)
        np.testing.assert_array_equal(alone.data, out.data[:1])

    def test_running_update(self):
        state = BatchNormState.create(1, 'bn', momentum=0.1)
        batch_norm2d(Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1)), state, training=True)
        self.assertAlmostEqual(state.running_mean[0], 0.2)
        self.assertAlmostEqual(state.running_var[0], 0.9 + 0.1 * 1.0)

    def test_batch_norm_gradients(self):
        rng = np.random.default_rng(7)
        state = BatchNormState.create(2, 'bn')
        state.scale.assign(rng.normal(size=2))
        state.shift.assign(rng.normal(size=2))
        x = Parameter(rng.normal(size=(3, 2, 2, 3)), 'x')
        weights = Tensor(rng.normal(size=(3, 2, 2, 3)))
        self.assertGradientsMatch(lambda: (batch_norm2d(x, state, True) * weights).sum(), [x, state.scale, state.shift])

    def test_layer_norm_values(self):
        scale, shift = Parameter(np.ones(3), 's'), Parameter(np.zeros(3), 'b')
        np.testing.assert_array_equal(layer_norm(Tensor(np.ones(3)), scale, shift).data, np.zeros(3))
        out = layer_norm(Tensor([1.0, -1.0]), Parameter(np.ones(2), 's'), Parameter(np.zeros(2), 'b'), eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-15)
        rows = layer_norm(Tensor(np.random.default_rng(8).normal(size=(5, 4))), Parameter(np.ones(4), 's'), Parameter(np.zeros(4), 'b'))
        np.testing.assert_allclose(rows.data.mean(axis=-1), 0.0, atol=1e-9)

    def test_layer_norm_gradients(self):
        rng = np.random.default_rng(9)
        x = Parameter(rng.normal(size=(3, 4)), 'x')
        scale, shift = Parameter(rng.normal(size=4), 's'), Parameter(rng.normal(size=4), 'b')
        weights = Tensor(rng.normal(size=(3, 4)))
        self.assertGradientsMatch(lambda: (layer_norm(x, scale, shift) * weights).sum(), [x, scale, shift])


class LayerTests(GradientCheckMixin, SimpleTestCase):

    def test_linear(self):
        out = linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Parameter([3.0, 4.0], 'b'))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])
        bias = Parameter(np.zeros(3), 'b')
        linear(Tensor(np.ones((2, 5, 4))), Tensor(np.ones((4, 3))), bias).sum().backward()
        np.testing.assert_array_equal(bias.grad, np.full(3, 10.0))

    def test_linear_gradients(self):
        rng = np.random.default_rng(10)
        x = Parameter(rng.normal(size=(2, 3, 4)), 'x')
        w, b = Parameter(rng.normal(size=(4, 5)), 'w'), Parameter(rng.normal(size=5), 'b')
        weights = Tensor(rng.normal(size=(2, 3, 5)))
        self.assertGradientsMatch(lambda: (linear(x, w, b) * weights).sum(), [x, w, b])

    def test_relu_softmax(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
        np.testing.assert_allclose(softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3), atol=1e-15)
        logits = np.random.default_rng(11).normal(size=(4, 6)) * 30
        y = softmax(Tensor(logits), axis=1).data
        self.assertTrue(np.all(y >= 0))
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(softmax(Tensor(logits + 123.0), axis=1).data, y, atol=1e-9)

    def test_dropout(self):
        x = Tensor(np.ones((200, 50)))
        np.testing.assert_array_equal(dropout(x, 0.5, training=False).data, x.data)
        out = dropout(x, 0.2, training=True, rng=np.random.default_rng(12)).data
        self.assertTrue(set(np.unique(out)) <= {0.0, 1.25})
        self.assertAlmostEqual(float((out == 0).mean()), 0.2, delta=0.02)
        with self.assertRaises(DomainError):
            dropout(x, 1.0, training=True, rng=np.random.default_rng(0))

    def test_dropout_replays_mask(self):
        x = Parameter(np.ones((4, 4)), 'x')
        out = dropout(x, 0.5, training=True, rng=np.random.default_rng(13))
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, out.data)

    def test_spatial_pool(self):
        x = Tensor(np.tile([1.0, 2.0, 3.0], (2, 3, 4, 1)))
        pooled = global_avg_pool_spatial(x)
        self.assertEqual(pooled.shape, (2, 3, 4))
        np.testing.assert_array_equal(pooled.data, 2.0)

    def test_softmax_cross_entropy_gradient(self):
        logits = Parameter([0.3, -1.2, 2.0], 'z')
        p = softmax(logits).data.copy()
        cross_entropy_loss(softmax(logits), 1).backward()
        np.testing.assert_allclose(logits.grad, p - np.array([0.0, 1.0, 0.0]), atol=1e-12)

    def test_cross_entropy_values(self):
        self.assertAlmostEqual(cross_entropy_loss(Tensor([0.8, 0.1, 0.1]), 0).item(), -math.log(0.8), places=12)
        self.assertAlmostEqual(cross_entropy_loss(Tensor(np.full(3, 1 / 3)), 2).item(), math.log(3), places=12)
        self.assertEqual(cross_entropy_loss(Tensor([1.0, 0.0, 0.0]), 0).item(), 0.0)
        self.assertAlmostEqual(cross_entropy_loss(Tensor([1.0, 0.0, 0.0]), 1).item(), -math.log(1e-12), places=9)


class AttentionPoolTests(GradientCheckMixin, SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(14)
        self.F = 4
        self.O = Parameter(rng.normal(size=(1, 4)), 'O')
        self.W_K = Parameter(rng.normal(size=(4, 4)), 'W_K')
        self.W_V = Parameter(rng.normal(size=(4, 4)), 'W_V')

    def test_identical_rows_average_uniformly(self):
        row = np.random.default_rng(15).normal(size=(1, 4))
        Z = Tensor(np.repeat(row, 5, axis=0))
        q = attention_pool(Z, self.O, self.W_K, self.W_V)
        np.testing.assert_allclose(q.data, self.O.data + row @ self.W_V.data, atol=1e-12)

    def test_singleton_set(self):
        Z = Tensor(np.random.default_rng(16).normal(size=(1, 4)))
        q = attention_pool(Z, self.O, self.W_K, self.W_V)
        np.testing.assert_allclose(q.data, self.O.data + Z.data @ self.W_V.data, atol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(17)
        Z = rng.normal(size=(7, 4))
        base = attention_pool(Tensor(Z), self.O, self.W_K, self.W_V).data
        for _ in range(10):
            shuffled = attention_pool(Tensor(Z[rng.permutation(7)]), self.O, self.W_K, self.W_V).data
            np.testing.assert_allclose(shuffled, base, atol=1e-12)

    def test_gradients(self):
        Z = Parameter(np.random.default_rng(18).normal(size=(3, 4)), 'Z')
        weights = Tensor(np.random.default_rng(19).normal(size=(1, 4)))
        self.assertGradientsMatch(
            lambda: (attention_pool(Z, self.O, self.W_K, self.W_V) * weights).sum(),
            [Z, self.O, self.W_K, self.W_V],
        )


class AdamTests(SimpleTestCase):

    def test_first_step_moves_by_lr(self):
        theta = Parameter(np.zeros(1), 'theta')
        opt = AdamState(lr=1e-3)
        theta.grad[:] = 1.0
        adam_step([theta], opt)
        self.assertAlmostEqual(theta.data[0], -1e-3 / (1 + 1e-8), places=15)
        theta.grad[:] = 1.0
        adam_step([theta], opt)
        self.assertAlmostEqual(theta.data[0], -2e-3 / (1 + 1e-8), places=12)
        np.testing.assert_array_equal(theta.grad, 0.0)

    def test_zero_gradient_keeps_parameters(self):
        theta = Parameter(np.arange(3.0), 'theta')
        adam_step([theta], AdamState(lr=0.1))
        np.testing.assert_array_equal(theta.data, np.arange(3.0))

    def test_non_finite_gradient(self):
        theta = Parameter(np.zeros(2), 'theta')
        theta.grad[0] = np.nan
        with self.assertRaises(TrainingError):
            adam_step([theta], AdamState(lr=0.1))

    def test_duplicate_names(self):
        with self.assertRaises(UsageError):
            adam_step([Parameter(np.zeros(1), 'w'), Parameter(np.zeros(1), 'w')], AdamState(lr=0.1))

    def test_settings_defaults(self):
        opt = AdamState.from_settings(2e-5)
        self.assertEqual((opt.beta1, opt.beta2, opt.eps), (0.9, 0.999, 1e-8))
