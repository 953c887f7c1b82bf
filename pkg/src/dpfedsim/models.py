"""Small differentiable models with hand-coded gradients.

Parameters live in a single flat float64 vector so the federation layer
can clip, average and perturb them without knowing the architecture.
Three kinds are supported: linear regression (squared error), multinomial
logistic regression (cross entropy) and a one-hidden-layer tanh network
with either head.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream, StreamLabel, gaussian_vector

DEFAULT_HIDDEN_DIM = 16

# Substream of the DATA_GEN label reserved for parameter initialisation.
INIT_SUBSTREAM = 2


class ModelKind(enum.Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    MLP = "mlp"


class LossKind(enum.Enum):
    SQUARED_ERROR = "squared_error"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and loss; fully determines the flat parameter layout."""

    kind: ModelKind
    input_dim: int
    output_dim: int = 1
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    loss: LossKind = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1 or self.hidden_dim < 1:
            raise ValueError("model dimensions must be positive")
        if self.loss is None:
            default = (
                LossKind.CROSS_ENTROPY if self.kind is ModelKind.LOGISTIC else LossKind.SQUARED_ERROR
            )
            object.__setattr__(self, "loss", default)
        if self.kind is ModelKind.LINEAR and self.loss is not LossKind.SQUARED_ERROR:
            raise ValueError("linear models require the squared-error loss")
        if self.kind is ModelKind.LOGISTIC and self.loss is not LossKind.CROSS_ENTROPY:
            raise ValueError("logistic models require the cross-entropy loss")
        if self.loss is LossKind.CROSS_ENTROPY and self.output_dim < 2:
            raise ValueError("cross entropy needs at least 2 output classes")

    @property
    def param_count(self) -> int:
        if self.kind is ModelKind.MLP:
            h = self.hidden_dim
            return h * self.input_dim + h + self.output_dim * h + self.output_dim
        return self.output_dim * self.input_dim + self.output_dim


def init_params(spec: ModelSpec, master_seed: int) -> np.ndarray:
    """Initial flat parameter vector.

    Convex models start at zero.  The tanh network needs symmetry
    breaking, so its weight matrices get fan-in-scaled Gaussians from a
    dedicated substream; biases start at zero.
    """
    params = np.zeros(spec.param_count)
    if spec.kind is not ModelKind.MLP:
        return params
    h, d, k = spec.hidden_dim, spec.input_dim, spec.output_dim
    stream = RngStream(master_seed, StreamLabel.DATA_GEN, round_index=0, substream=INIT_SUBSTREAM)
    raw = gaussian_vector(stream, h * d + k * h, 1.0)
    params[: h * d] = raw[: h * d] / np.sqrt(d)
    params[h * d + h : h * d + h + k * h] = raw[h * d :] / np.sqrt(h)
    return params


def _check_batch(spec: ModelSpec, params: np.ndarray, features: np.ndarray, targets: np.ndarray):
    if params.shape != (spec.param_count,):
        raise ValueError(f"expected {spec.param_count} parameters, got shape {params.shape}")
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ValueError(f"features must have shape (m, {spec.input_dim}), got {features.shape}")
    if features.shape[0] == 0:
        raise ValueError("batch must contain at least one example")
    if targets.shape[0] != features.shape[0]:
        raise ValueError(
            f"targets ({targets.shape[0]}) and features ({features.shape[0]}) disagree on batch size"
        )


def _regression_targets(spec: ModelSpec, targets: np.ndarray) -> np.ndarray:
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        if spec.output_dim != 1:
            raise ValueError(f"1-d targets require output_dim=1, got {spec.output_dim}")
        return y[:, None]
    if y.shape[1] != spec.output_dim:
        raise ValueError(f"targets must have {spec.output_dim} columns, got {y.shape[1]}")
    return y


def _class_targets(spec: ModelSpec, targets: np.ndarray) -> np.ndarray:
    y = np.asarray(targets)
    if y.ndim != 1:
        raise ValueError("class targets must be a 1-d array of labels")
    labels = y.astype(np.int64)
    if np.any(labels != y):
        raise ValueError("class targets must be integers")
    if labels.min() < 0 or labels.max() >= spec.output_dim:
        raise ValueError(f"labels must lie in [0, {spec.output_dim}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(spec: ModelSpec, params: np.ndarray, features: np.ndarray):
    """Model outputs plus the intermediates backprop needs."""
    d, k = spec.input_dim, spec.output_dim
    if spec.kind is ModelKind.MLP:
        h = spec.hidden_dim
        w1 = params[: h * d].reshape(h, d)
        b1 = params[h * d : h * d + h]
        w2 = params[h * d + h : h * d + h + k * h].reshape(k, h)
        b2 = params[h * d + h + k * h :]
        hidden = np.tanh(features @ w1.T + b1)
        return hidden @ w2.T + b2, (w1, w2, hidden)
    w = params[: k * d].reshape(k, d)
    b = params[k * d :]
    return features @ w.T + b, None


def loss_and_gradient(
    spec: ModelSpec, params: np.ndarray, features: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient in the flat parameters.

    Squared error is ``0.5 * mean_i ||pred_i - y_i||^2`` (sum over output
    coordinates, mean over examples); cross entropy is the mean negative
    log-likelihood of the integer labels.
    """
    _check_batch(spec, params, features, targets)
    outputs, cache = _forward(spec, params, features)
    m = features.shape[0]

    if spec.loss is LossKind.SQUARED_ERROR:
        residual = outputs - _regression_targets(spec, targets)
        loss = 0.5 * float(np.sum(residual * residual)) / m
        dout = residual / m
    else:
        labels = _class_targets(spec, targets)
        log_probs = _log_softmax(outputs)
        loss = -float(np.mean(log_probs[np.arange(m), labels]))
        dout = np.exp(log_probs)
        dout[np.arange(m), labels] -= 1.0
        dout /= m

    grad = np.empty_like(params)
    d, k = spec.input_dim, spec.output_dim
    if spec.kind is ModelKind.MLP:
        w1, w2, hidden = cache
        h = spec.hidden_dim
        dhidden = (dout @ w2) * (1.0 - hidden * hidden)
        grad[: h * d] = (dhidden.T @ features).ravel()
        grad[h * d : h * d + h] = dhidden.sum(axis=0)
        grad[h * d + h : h * d + h + k * h] = (dout.T @ hidden).ravel()
        grad[h * d + h + k * h :] = dout.sum(axis=0)
    else:
        grad[: k * d] = (dout.T @ features).ravel()
        grad[k * d :] = dout.sum(axis=0)
    return loss, grad


def evaluate(
    spec: ModelSpec, params: np.ndarray, features: np.ndarray, targets: np.ndarray
) -> tuple[float, float]:
    """(mean loss, task metric): accuracy for cross entropy, MSE otherwise."""
    _check_batch(spec, params, features, targets)
    outputs, _ = _forward(spec, params, features)
    m = features.shape[0]
    if spec.loss is LossKind.CROSS_ENTROPY:
        labels = _class_targets(spec, targets)
        log_probs = _log_softmax(outputs)
        loss = -float(np.mean(log_probs[np.arange(m), labels]))
        metric = float(np.mean(np.argmax(outputs, axis=1) == labels))
    else:
        residual = outputs - _regression_targets(spec, targets)
        loss = 0.5 * float(np.sum(residual * residual)) / m
        metric = float(np.mean(residual * residual))
    return loss, metric
