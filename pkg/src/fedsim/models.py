"""Loss models with exact gradients.

Three kinds are provided:

* :class:`QuadraticModel` -- ``0.5 * sum_k A_k (w_k - c_k)^2`` with a diagonal
  curvature, used to build heterogeneous client objectives whose global
  optimum is known in closed form.
* :class:`LogisticModel` -- multinomial logistic regression.
* :class:`MLPModel` -- one tanh hidden layer followed by a softmax output.

All models work on flat ``float64`` parameter vectors. The classification
models use mean cross-entropy over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .paramcore import ParamVector


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(1, -1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.shape[0] < 1:
            raise ValueError("a batch needs at least one row")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(
                f"batch has {features.shape[0]} rows but {labels.shape[0]} labels"
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


class DivergenceError(FloatingPointError):
    """Raised when a loss or an update stops being finite."""

    def __init__(self, message: str, round_index: Optional[int] = None,
                 client_id: Optional[int] = None):
        self.round_index = round_index
        self.client_id = client_id
        where = []
        if round_index is not None:
            where.append(f"round {round_index}")
        if client_id is not None:
            where.append(f"client {client_id}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


def _check_params(w: np.ndarray, n: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ValueError(f"parameter vector has length {w.shape[0]}, model expects {n}")
    return w


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = _log_softmax(logits)
    return float(-logp[np.arange(labels.shape[0]), labels].mean())


def _softmax_residual(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # d(mean CE)/d(logits)
    logp = _log_softmax(logits)
    probs = np.exp(logp)
    probs[np.arange(labels.shape[0]), labels] -= 1.0
    return probs / labels.shape[0]


class QuadraticModel:
    kind = "quadratic"

    def __init__(self, center: Sequence[float], curvature=1.0):
        self.center = np.asarray(center, dtype=np.float64).reshape(-1)
        if self.center.size < 1:
            raise ValueError("quadratic center must be non-empty")
        curv = np.broadcast_to(
            np.asarray(curvature, dtype=np.float64), self.center.shape
        ).copy()
        if not np.all(curv > 0):
            raise ValueError("quadratic curvature entries must be strictly positive")
        self.curvature = curv
        self.center.setflags(write=False)
        self.curvature.setflags(write=False)

    @property
    def num_params(self) -> int:
        return self.center.shape[0]

    def init_params(self, rng=None) -> ParamVector:
        return np.zeros(self.num_params)

    def loss(self, w, batch=None) -> float:
        w = _check_params(w, self.num_params)
        r = w - self.center
        return float(0.5 * np.sum(self.curvature * r * r))

    def gradient(self, w, batch=None) -> ParamVector:
        w = _check_params(w, self.num_params)
        return self.curvature * (w - self.center)


class LogisticModel:
    """Multinomial logistic regression; parameters are ``[W (d x K), b (K)]``."""

    kind = "logistic"

    def __init__(self, input_dim: int, num_classes: int):
        if input_dim < 1 or num_classes < 2:
            raise ValueError("logistic model needs input_dim >= 1 and num_classes >= 2")
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)

    @property
    def num_params(self) -> int:
        return (self.input_dim + 1) * self.num_classes

    def init_params(self, rng=None) -> ParamVector:
        return np.zeros(self.num_params)

    def _unpack(self, w):
        w = _check_params(w, self.num_params)
        d, k = self.input_dim, self.num_classes
        return w[: d * k].reshape(d, k), w[d * k:]

    def _check_batch(self, batch: Batch) -> None:
        if batch.features.shape[1] != self.input_dim:
            raise ValueError(
                f"batch has {batch.features.shape[1]} features, model expects {self.input_dim}"
            )
        if batch.labels.min() < 0 or batch.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def scores(self, w, features: np.ndarray) -> np.ndarray:
        W, b = self._unpack(w)
        return features @ W + b

    def loss(self, w, batch: Batch) -> float:
        self._check_batch(batch)
        return _cross_entropy(self.scores(w, batch.features), batch.labels)

    def gradient(self, w, batch: Batch) -> ParamVector:
        self._check_batch(batch)
        W, b = self._unpack(w)
        resid = _softmax_residual(batch.features @ W + b, batch.labels)
        return np.concatenate([(batch.features.T @ resid).ravel(), resid.sum(axis=0)])


class MLPModel:
    """One hidden tanh layer; parameters are ``[W1, b1, W2, b2]`` flattened."""

    kind = "mlp"

    def __init__(self, input_dim: int, hidden_dim: int, num_classes: int):
        if input_dim < 1 or hidden_dim < 1 or num_classes < 2:
            raise ValueError("mlp needs input_dim, hidden_dim >= 1 and num_classes >= 2")
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.num_classes = int(num_classes)

    @property
    def num_params(self) -> int:
        d, h, k = self.input_dim, self.hidden_dim, self.num_classes
        return d * h + h + h * k + k

    def init_params(self, rng) -> ParamVector:
        d, h, k = self.input_dim, self.hidden_dim, self.num_classes
        s1 = 1.0 / np.sqrt(d)
        s2 = 1.0 / np.sqrt(h)
        return np.concatenate([
            rng.uniform(-s1, s1, d * h),
            rng.uniform(-s1, s1, h),
            rng.uniform(-s2, s2, h * k),
            rng.uniform(-s2, s2, k),
        ])

    def _unpack(self, w):
        w = _check_params(w, self.num_params)
        d, h, k = self.input_dim, self.hidden_dim, self.num_classes
        i = 0
        W1 = w[i:i + d * h].reshape(d, h)
        i += d * h
        b1 = w[i:i + h]
        i += h
        W2 = w[i:i + h * k].reshape(h, k)
        i += h * k
        b2 = w[i:i + k]
        return W1, b1, W2, b2

    _check_batch = LogisticModel._check_batch

    def scores(self, w, features: np.ndarray) -> np.ndarray:
        W1, b1, W2, b2 = self._unpack(w)
        return np.tanh(features @ W1 + b1) @ W2 + b2

    def loss(self, w, batch: Batch) -> float:
        self._check_batch(batch)
        return _cross_entropy(self.scores(w, batch.features), batch.labels)

    def gradient(self, w, batch: Batch) -> ParamVector:
        self._check_batch(batch)
        W1, b1, W2, b2 = self._unpack(w)
        x = batch.features
        hidden = np.tanh(x @ W1 + b1)
        resid = _softmax_residual(hidden @ W2 + b2, batch.labels)
        d_hidden = (resid @ W2.T) * (1.0 - hidden * hidden)
        return np.concatenate([
            (x.T @ d_hidden).ravel(),
            d_hidden.sum(axis=0),
            (hidden.T @ resid).ravel(),
            resid.sum(axis=0),
        ])


def loss(model, w, batch=None) -> float:
    value = model.loss(w, batch)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}")
    return value


def gradient(model, w, batch=None) -> ParamVector:
    return model.gradient(w, batch)


def finite_diff_gradient(model, w, batch=None, h: float = 1e-5) -> ParamVector:
    """Central-difference gradient, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    w = np.asarray(w, dtype=np.float64).reshape(-1).copy()
    out = np.empty_like(w)
    for k in range(w.shape[0]):
        orig = w[k]
        w[k] = orig + h
        up = model.loss(w, batch)
        w[k] = orig - h
        down = model.loss(w, batch)
        w[k] = orig
        out[k] = (up - down) / (2.0 * h)
    return out


def predict(model, w, features: np.ndarray) -> np.ndarray:
    if model.kind == "quadratic":
        raise TypeError("quadratic models do not make class predictions")
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(model.scores(w, np.asarray(features, dtype=np.float64)), axis=1)


def predict_accuracy(model, w, data: Batch) -> float:
    pred = predict(model, w, data.features)
    return float(np.mean(pred == data.labels))


def quadratic_optimum(models: Sequence[QuadraticModel]) -> ParamVector:
    """Minimiser of the uniform average of diagonal quadratics."""
    if not models:
        raise ValueError("need at least one quadratic")
    num = np.zeros(models[0].num_params)
    den = np.zeros(models[0].num_params)
    for m in models:
        num += m.curvature * m.center
        den += m.curvature
    return num / den


def make_model(kind: str, input_dim: int, num_classes: int, hidden_dim: int = 32):
    if kind == "logistic":
        return LogisticModel(input_dim, num_classes)
    if kind == "mlp":
        return MLPModel(input_dim, hidden_dim, num_classes)
    raise ValueError(f"unknown classification model kind {kind!r}")
