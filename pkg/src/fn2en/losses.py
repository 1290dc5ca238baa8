"""Stage-1 feature regression, stage-2 cross-entropy and their shared pieces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, abs_pow, apply_op, as_tensor, mean, mul, sub, sum_

MODES = ("full-map", "channel-average")
REDUCTIONS = ("sum", "mean")


def spatial_average(activation):
    """Per-channel mean over the two trailing (spatial) axes.

    Accepts ``C x H x W`` or batched ``N x C x H x W`` input.
    """
    activation = as_tensor(activation)
    if activation.ndim not in (3, 4):
        raise ShapeError(f"spatial_average expects CxHxW or NxCxHxW, got {activation.shape}")
    return mean(activation, axis=(-2, -1))


@dataclass(frozen=True)
class RegressionLossConfig:
    p: float = 2.0
    mode: str = "full-map"
    reduction: str = "mean"

    def __post_init__(self):
        if not self.p > 0:
            raise ConfigError(f"regression loss order p must be positive, got {self.p}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown regression mode {self.mode!r}; expected one of {MODES}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"unknown reduction {self.reduction!r}; expected one of {REDUCTIONS}")


def _batch_size(t):
    return 1 if t.ndim <= 1 else t.shape[0]


def regression_loss(student, teacher, cfg=None):
    """``sum |student - teacher|**p``, reduced over the batch axis.

    The teacher side is detached so gradients only reach the student.
    Inputs of rank <= 1 are treated as a single sample.
    """
    cfg = cfg or RegressionLossConfig()
    student = as_tensor(student)
    target = Tensor(np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher, dtype=student.dtype))
    if cfg.mode == "channel-average":
        student, target = spatial_average(student), spatial_average(target)
    if student.shape != target.shape:
        raise ShapeError(f"student features {student.shape} != teacher features {target.shape}")
    total = sum_(abs_pow(sub(student, target), cfg.p))
    if cfg.reduction == "mean":
        total = mul(total, 1.0 / _batch_size(student))
    return total


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(np.asarray(logits)))


def cross_entropy(logits, labels, reduction="mean"):
    """Negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    if reduction not in REDUCTIONS:
        raise ConfigError(f"unknown reduction {reduction!r}")
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x M logits, got {logits.shape}")
    n, m = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= m))
    if bad.size:
        raise DataError(f"labels outside [0, {m})", [f"row {i}: label {labels[i]}" for i in bad[:10]])
    labels = labels.astype(np.int64)
    logp = log_softmax(logits.data)
    scale = 1.0 if reduction == "sum" else 1.0 / n
    value = -logp[np.arange(n), labels].sum() * scale

    def grad_fn(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g * scale),)

    return apply_op(np.asarray(value, dtype=logits.dtype), (logits,), grad_fn, "cross_entropy")


@dataclass
class DistributionModel:
    """Exponential neuron density ``C_p * exp(-||X - mean||_p^p)``.

    ``C_p`` only shifts the log-density by a constant and is never evaluated.
    """

    mean: np.ndarray
    p: float = 2.0

    def __post_init__(self):
        if not self.p > 0:
            raise ConfigError(f"p must be positive, got {self.p}")
        self.mean = np.asarray(self.mean.data if isinstance(self.mean, Tensor) else self.mean)


def log_density(model, X):
    """Log-density of ``X`` up to the additive constant ``log C_p``."""
    X = as_tensor(X)
    if X.shape != model.mean.shape:
        raise ShapeError(f"X {X.shape} does not match the model mean {model.mean.shape}")
    mu = Tensor(model.mean.astype(X.dtype))
    return mul(sum_(abs_pow(sub(X, mu), model.p)), -1.0)
