"""
Numpy models with closed-form gradients over a flat parameter vector.
"""
from abc import ABC, abstractmethod
from typing import Tuple

import numpy as np
from scipy import special

from .errors import DimensionMismatchError, DomainError

MODEL_KINDS = ('logreg', 'mlp')


class Model(ABC):
    dim: int
    classes: int

    @property
    @abstractmethod
    def num_params(self) -> int:
        ...

    @abstractmethod
    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        ...

    @abstractmethod
    def logits(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def per_example_grads(self, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(per-record losses, per-record gradients of shape (n, num_params))."""

    @abstractmethod
    def loss_grad(self, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        """Mean cross-entropy and its exact gradient."""

    def check(self, params: np.ndarray, x: np.ndarray, y: np.ndarray):
        if params.shape != (self.num_params,):
            raise DimensionMismatchError(self.num_params, params.size, 'parameters')
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionMismatchError(self.dim, x.shape[-1] if x.ndim else 0)
        if y.shape != (x.shape[0],):
            raise DimensionMismatchError(x.shape[0], y.size, 'labels')
        if x.shape[0] == 0:
            raise DomainError('batch', 0, 'a non-empty batch')

    def evaluate(self, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
        """(log-loss, accuracy) on a held-out set."""
        logits = self.logits(params, x)
        loss = _cross_entropy(logits, y).mean()
        accuracy = float(np.mean(np.argmax(logits, axis=1) == y))
        return float(loss), accuracy


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    return special.logsumexp(logits, axis=1) - logits[np.arange(y.size), y]


def _softmax_residual(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    residual = special.softmax(logits, axis=1)
    residual[np.arange(y.size), y] -= 1.0
    return residual


class SoftmaxRegression(Model):
    """Multinomial logistic regression; params = [W (dim x classes) row-major, b (classes)]."""

    def __init__(self, dim: int, classes: int):
        if dim < 1 or classes < 2:
            raise DomainError('model', (dim, classes), 'dim >= 1 and classes >= 2')
        self.dim = dim
        self.classes = classes

    @property
    def num_params(self) -> int:
        return (self.dim + 1) * self.classes

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.num_params)

    def _unpack(self, params: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        split = self.dim * self.classes
        return params[:split].reshape(self.dim, self.classes), params[split:]

    def logits(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        weights, bias = self._unpack(params)
        return x @ weights + bias

    def loss_grad(self, params, x, y):
        self.check(params, x, y)
        logits = self.logits(params, x)
        residual = _softmax_residual(logits, y) / y.size
        grad = np.concatenate([(x.T @ residual).ravel(), residual.sum(axis=0)])
        return float(_cross_entropy(logits, y).mean()), grad

    def per_example_grads(self, params, x, y):
        self.check(params, x, y)
        logits = self.logits(params, x)
        residual = _softmax_residual(logits, y)
        grads_w = np.einsum('ni,nc->nic', x, residual).reshape(y.size, -1)
        return _cross_entropy(logits, y), np.concatenate([grads_w, residual], axis=1)


class MultiLayerPerceptron(Model):
    """One tanh hidden layer; params = [W1, b1, W2, b2] flattened in that order."""

    def __init__(self, dim: int, classes: int, hidden: int = 32):
        if dim < 1 or classes < 2 or hidden < 1:
            raise DomainError('model', (dim, hidden, classes), 'dim, hidden >= 1 and classes >= 2')
        self.dim = dim
        self.classes = classes
        self.hidden = hidden

    @property
    def num_params(self) -> int:
        return self.dim * self.hidden + self.hidden + self.hidden * self.classes + self.classes

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        w1 = rng.normal(0, 1 / np.sqrt(self.dim), size=(self.dim, self.hidden))
        w2 = rng.normal(0, 1 / np.sqrt(self.hidden), size=(self.hidden, self.classes))
        return np.concatenate([w1.ravel(), np.zeros(self.hidden), w2.ravel(), np.zeros(self.classes)])

    def _unpack(self, params: np.ndarray):
        d, h, c = self.dim, self.hidden, self.classes
        cuts = np.cumsum([d * h, h, h * c])
        w1, b1, w2, b2 = np.split(params, cuts)
        return w1.reshape(d, h), b1, w2.reshape(h, c), b2

    def _forward(self, params, x):
        w1, b1, w2, b2 = self._unpack(params)
        hidden = np.tanh(x @ w1 + b1)
        return hidden, hidden @ w2 + b2, w2

    def logits(self, params, x):
        return self._forward(params, x)[1]

    def loss_grad(self, params, x, y):
        self.check(params, x, y)
        hidden, logits, w2 = self._forward(params, x)
        residual = _softmax_residual(logits, y) / y.size
        back = (residual @ w2.T) * (1 - hidden ** 2)
        grad = np.concatenate([
            (x.T @ back).ravel(), back.sum(axis=0),
            (hidden.T @ residual).ravel(), residual.sum(axis=0),
        ])
        return float(_cross_entropy(logits, y).mean()), grad

    def per_example_grads(self, params, x, y):
        self.check(params, x, y)
        hidden, logits, w2 = self._forward(params, x)
        residual = _softmax_residual(logits, y)
        back = (residual @ w2.T) * (1 - hidden ** 2)
        n = y.size
        grads = np.concatenate([
            np.einsum('ni,nh->nih', x, back).reshape(n, -1), back,
            np.einsum('nh,nc->nhc', hidden, residual).reshape(n, -1), residual,
        ], axis=1)
        return _cross_entropy(logits, y), grads


def build_model(kind: str, dim: int, classes: int, hidden: int = 32) -> Model:
    if kind == 'logreg':
        return SoftmaxRegression(dim, classes)
    if kind == 'mlp':
        return MultiLayerPerceptron(dim, classes, hidden)
    raise DomainError('model', kind, f'one of {MODEL_KINDS}')
