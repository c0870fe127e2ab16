"""
LocalLearner defines what federated training needs from a model family and provides the
reference implementation, a multinomial logistic regression with an optional tanh hidden
layer.

Parameters are one flat float64 vector so aggregation is plain vector arithmetic. Training
is minibatch SGD with momentum and weight decay in the usual deep-learning form:

    g = grad + weight_decay * w
    v = momentum * v + g
    w = w - learning_rate * v

The minibatch order of every epoch comes from the seed passed to `train`, so a call is fully
determined by its arguments.
"""

import logging
from dataclasses import dataclass
from typing import Protocol, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from fbnll_simulator.Errors import ConfigError, EmptyUserError, NumericError, ShapeError
from fbnll_simulator.LabeledDataset import LabeledDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingHyper:
    """
    Attributes:
        rounds (int): G, global communication rounds (0 returns the initial models)
        local_epochs (int): E
        learning_rate (float): SGD step size
        batch_size (int): Minibatch size
        momentum (float): Momentum coefficient in [0, 1)
        weight_decay (float): L2 coefficient added to the gradient
        seed (int): Master seed of training
    """
    rounds: int = 80
    local_epochs: int = 2
    learning_rate: float = 5e-4
    batch_size: int = 64
    momentum: float = 0.5
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 1:
            raise ConfigError("rounds must be >= 0 and local_epochs >= 1")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("learning_rate must be positive and batch_size at least 1")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ConfigError("momentum must be in [0, 1) and weight_decay non-negative")


class LocalLearner(Protocol):
    """The contract federated training relies on."""

    @property
    def num_params(self) -> int:
        ...

    def init(self, seed: int) -> np.ndarray:
        ...

    def train(self, params: np.ndarray, ds: LabeledDataset, hyper: TrainingHyper, seed: int) -> np.ndarray:
        ...

    def loss(self, params: np.ndarray, ds: LabeledDataset) -> float:
        ...

    def accuracy(self, params: np.ndarray, ds: LabeledDataset) -> float:
        ...


class SoftmaxLearner:
    """
    Multinomial logistic regression on d-dimensional features, optionally with one tanh
    hidden layer of `hidden_units` units.

    Args:
        input_dim (int): d
        num_classes (int): C
        hidden_units (int): Width of the hidden layer, 0 for plain logistic regression
    """

    def __init__(self, input_dim: int, num_classes: int, hidden_units: int = 0):
        if input_dim < 1 or num_classes < 2 or hidden_units < 0:
            raise ConfigError(
                f"invalid learner shape d={input_dim}, C={num_classes}, hidden={hidden_units}"
            )
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.hidden_units = hidden_units
        widths = [input_dim] + ([hidden_units] if hidden_units else []) + [num_classes]
        self._layers = list(zip(widths[:-1], widths[1:]))

    @property
    def num_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self._layers)

    def payload_bytes(self) -> int:
        """One model as float32."""
        return self.num_params * 4

    def unpack(self, params: np.ndarray):
        """Splits the flat vector into [(W, b), ...] views, one pair per layer."""
        if params.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got shape {params.shape}")
        out, offset = [], 0
        for fan_in, fan_out in self._layers:
            W = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = params[offset:offset + fan_out]
            offset += fan_out
            out.append((W, b))
        return out

    def init(self, seed: int) -> np.ndarray:
        """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""
        rng = np.random.default_rng(seed)
        parts = []
        for fan_in, fan_out in self._layers:
            parts.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=fan_in * fan_out))
            parts.append(np.zeros(fan_out))
        return np.concatenate(parts)

    def _check(self, ds: LabeledDataset) -> None:
        if ds.n == 0:
            raise EmptyUserError("the learner needs at least one sample")
        if ds.dim != self.input_dim:
            raise ShapeError(f"learner expects {self.input_dim}-dimensional features, got {ds.dim}")
        if ds.observed_labels.max() >= self.num_classes:
            raise ShapeError(f"labels must lie in [0, {self.num_classes})")

    def _forward(self, params: np.ndarray, X: np.ndarray):
        layers = self.unpack(params)
        activations = [X]
        for W, b in layers[:-1]:
            activations.append(np.tanh(activations[-1] @ W + b))
        W, b = layers[-1]
        logits = activations[-1] @ W + b
        return layers, activations, logits

    def _loss_and_grad(self, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        layers, activations, logits = self._forward(params, X)
        n = X.shape[0]
        log_norm = logsumexp(logits, axis=1)
        loss = float(np.mean(log_norm - logits[np.arange(n), y]))

        delta = softmax(logits, axis=1)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads = []
        for depth in range(len(layers) - 1, -1, -1):
            W, _ = layers[depth]
            a = activations[depth]
            grads.append((a.T @ delta, delta.sum(axis=0)))
            if depth:
                delta = (delta @ W.T) * (1.0 - a ** 2)
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
        return loss, flat

    def loss(self, params: np.ndarray, ds: LabeledDataset) -> float:
        """Mean cross-entropy of the observed labels."""
        self._check(ds)
        return self._loss_and_grad(params, ds.features, ds.observed_labels)[0]

    def gradient(self, params: np.ndarray, ds: LabeledDataset) -> np.ndarray:
        self._check(ds)
        return self._loss_and_grad(params, ds.features, ds.observed_labels)[1]

    def predict(self, params: np.ndarray, X: np.ndarray) -> np.ndarray:
        return np.argmax(self._forward(params, X)[2], axis=1)

    def accuracy(self, params: np.ndarray, ds: LabeledDataset) -> float:
        """Fraction of samples whose observed label is predicted."""
        self._check(ds)
        return float(np.mean(self.predict(params, ds.features) == ds.observed_labels))

    def train(self, params: np.ndarray, ds: LabeledDataset, hyper: TrainingHyper, seed: int) -> np.ndarray:
        """
        E epochs of minibatch SGD starting from `params`. Returns new parameters; the input
        vector is not modified.

        Raises:
            NumericError: If the parameters diverge to NaN or infinity
        """
        self._check(ds)
        rng = np.random.default_rng(seed)
        w = np.array(params, dtype=np.float64, copy=True)
        velocity = np.zeros_like(w)
        X, y = ds.features, ds.observed_labels
        for _ in range(hyper.local_epochs):
            order = rng.permutation(ds.n)
            for start in range(0, ds.n, hyper.batch_size):
                batch = order[start:start + hyper.batch_size]
                _, grad = self._loss_and_grad(w, X[batch], y[batch])
                grad += hyper.weight_decay * w
                velocity = hyper.momentum * velocity + grad
                w -= hyper.learning_rate * velocity
        if not np.all(np.isfinite(w)):
            raise NumericError("local training diverged; lower the learning rate")
        return w
