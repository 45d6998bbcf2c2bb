"""Multiclass logistic regression: posteriors, loss, per-sample gradient, projection.

Parameters are a C x D matrix (one row of weights per class). All functions
here are pure; callers own any mutation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class ShapeError(ValueError):
    """Feature/parameter dimensions do not match."""


@dataclass
class Sample:
    """One (feature vector, class label) pair.

    Training data must be preprocessed so that ||x||_1 <= 1; the gradient
    sensitivity bound depends on it.
    """

    x: np.ndarray
    y: int


@dataclass
class ParamMatrix:
    """Softmax-regression parameters plus the two hyperparameters that ride with them.

    w:      (C, D) weight matrix, row k scores class k
    radius: projection-ball radius; the Frobenius norm of w never exceeds it
    l2:     L2 regularization weight (applied once per averaged gradient)
    """

    w: np.ndarray
    radius: float = 100.0
    l2: float = 0.0

    @property
    def n_classes(self) -> int:
        return self.w.shape[0]

    @property
    def n_features(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "ParamMatrix":
        return replace(self, w=self.w.copy())


def _check_features(params: ParamMatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.n_features:
        raise ShapeError(
            f"feature vector of length {x.shape[-1] if x.ndim else '?'} "
            f"does not match D={params.n_features}"
        )
    return x


def softmax_posteriors(params: ParamMatrix, x: np.ndarray) -> np.ndarray:
    """Class posteriors P(y=k|x), length C; computed with max-shifted exponentials."""
    x = _check_features(params, x)
    logits = params.w @ x
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def predict(params: ParamMatrix, x: np.ndarray) -> int:
    """Most probable class; ties broken toward the lowest class index."""
    x = _check_features(params, x)
    return int(np.argmax(params.w @ x))


def sample_loss(params: ParamMatrix, sample: Sample) -> float:
    """Cross-entropy of the sample under the current parameters (no L2 term)."""
    post = softmax_posteriors(params, sample.x)
    return float(-np.log(post[sample.y]))


def sample_gradient(params: ParamMatrix, sample: Sample) -> np.ndarray:
    """Gradient of sample_loss w.r.t. w: row k is x * (P(y=k|x) - [y == k])."""
    post = softmax_posteriors(params, sample.x)
    coeff = post.copy()
    coeff[sample.y] -= 1.0
    return np.outer(coeff, sample.x)


def project(params: ParamMatrix) -> ParamMatrix:
    """Rescale w back into the Frobenius ball of the configured radius.

    Inside the ball the input is returned unchanged. Rescaling repeats if
    rounding left the norm a few ulps above the radius, so the float norm of
    the result is truly <= radius and projecting twice changes nothing.
    """
    norm = float(np.linalg.norm(params.w))
    if norm <= params.radius:
        return params
    w = params.w
    while norm > params.radius:
        scale = params.radius / norm
        if scale >= 1.0:
            scale = float(np.nextafter(1.0, 0.0))
        w = w * scale
        norm = float(np.linalg.norm(w))
    return replace(params, w=w)


# Vectorized forms over (N, D) sample matrices. These share the max-shift
# normalization with the per-sample functions; equivalence is covered by tests.


def posterior_matrix(params: ParamMatrix, X: np.ndarray) -> np.ndarray:
    """Row-wise class posteriors for a stack of feature vectors, shape (N, C)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.n_features:
        raise ShapeError(f"sample matrix {X.shape} does not match D={params.n_features}")
    logits = X @ params.w.T
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def predict_batch(params: ParamMatrix, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.n_features:
        raise ShapeError(f"sample matrix {X.shape} does not match D={params.n_features}")
    return np.argmax(X @ params.w.T, axis=1)


def error_rate(params: ParamMatrix, X: np.ndarray, y: np.ndarray) -> float:
    """Misclassification fraction of predict() over a labeled sample matrix."""
    return float(np.mean(predict_batch(params, X) != np.asarray(y)))


def mean_gradient(params: ParamMatrix, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Average of sample_gradient over the rows of X, plus the l2 * w term."""
    post = posterior_matrix(params, X)
    coeff = post.copy()
    coeff[np.arange(X.shape[0]), np.asarray(y)] -= 1.0
    return coeff.T @ np.asarray(X, dtype=np.float64) / X.shape[0] + params.l2 * params.w


def mean_risk(params: ParamMatrix, X: np.ndarray, y: np.ndarray) -> float:
    """Average cross-entropy plus (l2/2) * ||w||^2 over a labeled sample matrix."""
    post = posterior_matrix(params, X)
    n = X.shape[0]
    nll = -np.log(post[np.arange(n), np.asarray(y)])
    return float(nll.mean() + 0.5 * params.l2 * np.sum(params.w**2))
