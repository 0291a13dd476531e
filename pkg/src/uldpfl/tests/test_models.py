import unittest

import numpy as np

from ..libraries.errors import DimensionMismatchError, DomainError
from ..libraries.models import MultiLayerPerceptron, SoftmaxRegression, build_model


def numeric_grad(model, params, x, y, eps=1e-6):
    grad = np.zeros_like(params)
    for i in range(params.size):
        step = np.zeros_like(params)
        step[i] = eps
        up, _ = model.loss_grad(params + step, x, y)
        down, _ = model.loss_grad(params - step, x, y)
        grad[i] = (up - down) / (2 * eps)
    return grad


class ModelTestCase(unittest.TestCase):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 3))
    y = rng.integers(0, 3, size=12)

    def _check_gradient(self, model):
        params = model.init_params(np.random.default_rng(1)) + np.random.default_rng(2).normal(0, 0.3, model.num_params)
        _, grad = model.loss_grad(params, self.x, self.y)
        self.assertTrue(np.allclose(grad, numeric_grad(model, params, self.x, self.y), atol=1e-6))

        losses, per_example = model.per_example_grads(params, self.x, self.y)
        self.assertEqual(per_example.shape, (self.y.size, model.num_params))
        self.assertTrue(np.allclose(per_example.mean(axis=0), grad, atol=1e-12))
        self.assertAlmostEqual(float(losses.mean()), model.loss_grad(params, self.x, self.y)[0], places=12)

    def test_softmax_gradient(self):
        self._check_gradient(SoftmaxRegression(3, 3))

    def test_mlp_gradient(self):
        self._check_gradient(MultiLayerPerceptron(3, 3, hidden=5))

    def test_zero_init_loss(self):
        model = SoftmaxRegression(3, 3)
        loss, _ = model.loss_grad(model.init_params(self.rng), self.x, self.y)
        self.assertAlmostEqual(loss, np.log(3), places=12)

    def test_evaluate(self):
        model = build_model('logreg', 3, 3)
        loss, accuracy = model.evaluate(model.init_params(self.rng), self.x, self.y)
        self.assertAlmostEqual(loss, np.log(3), places=12)
        self.assertTrue(0 <= accuracy <= 1)

    def test_shape_checks(self):
        model = SoftmaxRegression(3, 3)
        params = model.init_params(self.rng)
        with self.assertRaises(DimensionMismatchError):
            model.loss_grad(params, self.x[:, :2], self.y)
        with self.assertRaises(DimensionMismatchError):
            model.loss_grad(params[:-1], self.x, self.y)
        with self.assertRaises(DomainError):
            model.loss_grad(params, self.x[:0], self.y[:0])

    def test_build_model(self):
        self.assertIsInstance(build_model('mlp', 4, 2, hidden=8), MultiLayerPerceptron)
        with self.assertRaises(DomainError):
            build_model('cnn', 4, 2)
