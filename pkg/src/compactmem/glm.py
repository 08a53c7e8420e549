"""Generalized linear model primitives.

Features are stored column-wise: ``phi`` has shape ``(P, N)`` and each column
is one feature vector.  Parameters are a vector ``(P,)`` for single-output
models and a matrix ``(C, P)`` (one row per output/class) otherwise.

All losses are summed over examples, never averaged.
"""

from __future__ import annotations

import enum
import itertools
from math import comb

import numpy as np
from scipy.special import expit, log_expit, log_softmax, softmax, xlogy

DEFAULT_CLIP = 1e-4
MAX_POLY_FEATURES = 10**6


class Family(str, enum.Enum):
    LINEAR = "linear"
    BINARY = "binary"
    MULTICLASS = "multiclass"


def as_family(family) -> Family:
    return family if isinstance(family, Family) else Family(family)


def n_poly_features(dim: int, degree: int) -> int:
    """Number of monomials of total degree <= ``degree`` in ``dim`` variables."""
    return comb(dim + degree, degree)


def _monomials(dim: int, degree: int):
    for d in range(degree + 1):
        yield from itertools.combinations_with_replacement(range(dim), d)


def poly_features(x, degree: int, max_features: int = MAX_POLY_FEATURES) -> np.ndarray:
    """Polynomial feature map with the constant term first.

    Monomials are enumerated in graded lexicographic order: by total degree,
    then lexicographically on the sorted index tuple.  For ``x = [a, b]`` and
    ``degree = 2`` this gives ``[1, a, b, a^2, ab, b^2]``.  The degree-``d``
    output is always a prefix of the degree-``d + 1`` output.

    ``x`` may be a single vector ``(D,)`` or a batch ``(N, D)``; a batch returns
    the column-wise feature matrix ``(P, N)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not isinstance(degree, (int, np.integer)) or not 1 <= degree <= 8:
        raise ValueError(f"degree must be an integer in [1, 8], got {degree!r}")
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError(f"expected input of shape (D,) or (N, D), got {x.shape}")
    dim = X.shape[1]
    n_out = n_poly_features(dim, degree)
    if n_out > max_features:
        raise ValueError(
            f"poly features of degree {degree} on {dim} inputs give {n_out} "
            f"entries, above the cap of {max_features}"
        )
    out = np.empty((n_out, X.shape[0]))
    for row, idx in enumerate(_monomials(dim, degree)):
        out[row] = np.prod(X[:, list(idx)], axis=1) if idx else 1.0
    return out[:, 0] if single else out


def _check_dims(theta: np.ndarray, phi: np.ndarray) -> None:
    if phi.ndim != 2:
        raise ValueError(f"phi must be a (P, N) matrix, got shape {phi.shape}")
    if theta.shape[-1] != phi.shape[0]:
        raise ValueError(
            f"dimension mismatch: params have P={theta.shape[-1]}, "
            f"features have P={phi.shape[0]}"
        )


def logits(theta, phi) -> np.ndarray:
    """Linear predictor: ``(N,)`` for vector params, ``(C, N)`` for matrix params."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    _check_dims(theta, phi)
    return theta @ phi


def link(family, f: np.ndarray) -> np.ndarray:
    family = as_family(family)
    if family is Family.LINEAR:
        return f
    if family is Family.BINARY:
        return expit(f)
    return softmax(f, axis=0)


def predict(family, theta, phi) -> np.ndarray:
    """Mean prediction of the model for every column of ``phi``.

    Linear returns the raw predictor, binary the sigmoid probability of the
    positive class, multiclass the ``(C, N)`` softmax probabilities.
    """
    family = as_family(family)
    theta = np.asarray(theta, dtype=np.float64)
    if family is Family.BINARY and theta.ndim != 1:
        raise ValueError("binary logistic params must be a vector")
    if family is Family.MULTICLASS and (theta.ndim != 2 or theta.shape[0] < 2):
        raise ValueError("multiclass params must be a (C, P) matrix with C >= 2")
    return link(family, logits(theta, phi))


def curvature_from_logits(family, f: np.ndarray, clip: float = DEFAULT_CLIP) -> np.ndarray:
    family = as_family(family)
    if not 0.0 <= clip < 0.5:
        raise ValueError(f"clip must lie in [0, 0.5), got {clip}")
    if family is Family.LINEAR:
        n = f.shape[-1]
        return np.ones(n)
    if family is Family.BINARY:
        p = np.clip(expit(f), clip, 1.0 - clip)
        return p * (1.0 - p)
    p = np.clip(softmax(f, axis=0), clip, 1.0 - clip)
    return np.sum(p * (1.0 - p), axis=0)


def curvature(family, theta, phi, clip: float = DEFAULT_CLIP) -> np.ndarray:
    """Per-column curvature of the loss in the linear predictor.

    ``sigma(f)(1 - sigma(f))`` for binary, the trace ``sum_c p_c (1 - p_c)``
    of the softmax Jacobian for multiclass and ones for linear.  Probabilities
    are clipped to ``[clip, 1 - clip]`` first.
    """
    return curvature_from_logits(family, logits(theta, phi), clip)


def _binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n,):
        raise ValueError(f"binary labels must have shape ({n},), got {y.shape}")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("binary labels must lie in [0, 1]")
    return y


def _class_targets(y, n_classes: int, n: int) -> np.ndarray:
    """Integer labels ``(N,)`` or soft targets ``(C, N)`` as a ``(C, N)`` array."""
    y = np.asarray(y)
    if y.ndim == 1:
        if y.shape[0] != n:
            raise ValueError(f"expected {n} labels, got {y.shape[0]}")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("multiclass labels must be integers")
            y = y.astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"class labels must lie in [0, {n_classes})")
        out = np.zeros((n_classes, n))
        out[y, np.arange(n)] = 1.0
        return out
    if y.shape != (n_classes, n):
        raise ValueError(f"soft targets must have shape ({n_classes}, {n}), got {y.shape}")
    return y.astype(np.float64)


def task_loss_grad(family, theta, phi, y):
    """Summed negative log-likelihood over the columns of ``phi`` and its gradient.

    Linear uses half squared error (vector or multi-output targets), binary
    the logistic loss with labels in {0, 1}, multiclass the softmax
    cross-entropy with integer labels or ``(C, N)`` soft targets.
    """
    family = as_family(family)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    f = logits(theta, phi)
    n = phi.shape[1]

    if family is Family.LINEAR:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != f.shape:
            raise ValueError(f"linear targets must have shape {f.shape}, got {y.shape}")
        r = f - y
        return 0.5 * float(np.sum(r * r)), r @ phi.T

    if family is Family.BINARY:
        if theta.ndim != 1:
            raise ValueError("binary logistic params must be a vector")
        y = _binary_labels(y, n)
        # -log sigma(f) = softplus(-f);  -log(1 - sigma(f)) = softplus(f)
        loss = -float(np.sum(y * log_expit(f) + (1.0 - y) * log_expit(-f)))
        return loss, phi @ (expit(f) - y)

    if theta.ndim != 2 or theta.shape[0] < 2:
        raise ValueError("multiclass params must be a (C, P) matrix with C >= 2")
    Y = _class_targets(y, theta.shape[0], n)
    logp = log_softmax(f, axis=0)
    loss = -float(np.sum(Y * logp))
    return loss, (np.exp(logp) - Y) @ phi.T


def accuracy(family, theta, phi, labels) -> float:
    """Fraction of correctly classified columns.

    Binary thresholds the probability at 0.5; multiclass and multi-output
    linear models decode by argmax over outputs.
    """
    family = as_family(family)
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    f = logits(theta, phi)
    if f.ndim == 1:
        pred = (f > 0).astype(labels.dtype)
    else:
        pred = np.argmax(f, axis=0)
    return float(np.mean(pred == labels))


def entropy(family, p: np.ndarray) -> np.ndarray:
    """Self-entropy of stored responses, column-wise (zero for linear)."""
    family = as_family(family)
    if family is Family.LINEAR:
        return np.zeros(p.shape[-1])
    if family is Family.BINARY:
        return -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p))
    return -np.sum(xlogy(p, p), axis=0)


__all__ = [
    "DEFAULT_CLIP",
    "Family",
    "accuracy",
    "as_family",
    "curvature",
    "curvature_from_logits",
    "entropy",
    "link",
    "logits",
    "n_poly_features",
    "poly_features",
    "predict",
    "task_loss_grad",
]
