"""SGD machinery: inverse-sqrt learning-rate schedule, minibatch averaging, projected step."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import ParamMatrix, Sample, ShapeError, mean_gradient, project


@dataclass(frozen=True)
class LearningRateSchedule:
    """Step size base / sqrt(t) for the t-th accepted update (t starts at 1)."""

    base: float = 1.0
    kind: str = "inverse-sqrt"

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("schedule base must be positive")
        if self.kind != "inverse-sqrt":
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def learning_rate(sched: LearningRateSchedule, t: int) -> float:
    if t < 1:
        raise ValueError(f"update counter must be >= 1, got {t}")
    return sched.base / np.sqrt(t)


def average_gradients(samples: list[Sample], params: ParamMatrix) -> np.ndarray:
    """Mean per-sample gradient over the minibatch, plus the l2 * w term."""
    if not samples:
        raise ValueError("cannot average an empty minibatch")
    X = np.stack([s.x for s in samples])
    y = np.array([s.y for s in samples])
    return mean_gradient(params, X, y)


def sgd_step(params: ParamMatrix, grad: np.ndarray, eta: float) -> ParamMatrix:
    """One projected descent step: project(w - eta * grad)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.w.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match {params.w.shape}")
    return project(replace(params, w=params.w - eta * grad))
