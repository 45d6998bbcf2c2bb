"""Comparison systems: centralized batch, centralized SGD on perturbed data, per-device learning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import ParamMatrix, error_rate, mean_gradient, mean_risk
from .optim import LearningRateSchedule, average_gradients, learning_rate, sgd_step
from .privacy import PrivacySpec, perturb_features, perturb_label

CENTRAL_BATCH = "central_batch"
CENTRAL_SGD_PRIVATE = "central_sgd_private"
DECENTRALIZED = "decentralized"


@dataclass
class BaselineResult:
    kind: str
    final_error: float
    curve: list[tuple[int, int, float]]  # (update count, samples used, test error)
    params: ParamMatrix | None = None
    converged: bool = True
    per_device_errors: list[float] | None = None


def train_central_batch(
    train: Dataset,
    l2: float,
    iters: int = 500,
    grad_tol: float = 1e-5,
    test: Dataset | None = None,
) -> BaselineResult:
    """Full-gradient descent with Armijo backtracking; deterministic from the zero init."""
    train.check_l1()
    params = ParamMatrix(np.zeros((train.n_classes, train.n_features)), radius=math.inf, l2=l2)
    eta = 1.0
    converged = False
    for _ in range(iters):
        grad = mean_gradient(params, train.X, train.y)
        gnorm2 = float(np.sum(grad**2))
        if math.sqrt(gnorm2) < grad_tol:
            converged = True
            break
        risk = mean_risk(params, train.X, train.y)
        eta = min(eta * 2.0, 1e6)  # warm start from the last accepted step
        while eta > 1e-12:
            trial = ParamMatrix(params.w - eta * grad, radius=params.radius, l2=l2)
            if mean_risk(trial, train.X, train.y) <= risk - 1e-4 * eta * gnorm2:
                break
            eta *= 0.5
        params = ParamMatrix(params.w - eta * grad, radius=params.radius, l2=l2)
    err = error_rate(params, test.X, test.y) if test is not None else error_rate(params, train.X, train.y)
    return BaselineResult(
        kind=CENTRAL_BATCH,
        final_error=err,
        curve=[(0, len(train), err)],
        params=params,
        converged=converged,
    )


def perturb_dataset(train: Dataset, priv: PrivacySpec, rng: np.random.Generator) -> Dataset:
    """Sanitize every training sample once (features then label), as a raw-data release."""
    X = np.stack([perturb_features(train.X[i], priv.eps_x, rng) for i in range(len(train))])
    y = np.array(
        [perturb_label(int(train.y[i]), train.n_classes, priv.eps_y, rng) for i in range(len(train))],
        dtype=np.int64,
    )
    return Dataset(X, y, train.n_classes, provenance=f"perturbed({train.provenance})")


def train_central_sgd(
    train: Dataset,
    order: np.ndarray,
    b: int,
    sched: LearningRateSchedule,
    l2: float,
    radius: float,
    test: Dataset | None = None,
    eval_every: int = 20,
    init: ParamMatrix | None = None,
) -> tuple[ParamMatrix, list[tuple[int, int, float]]]:
    """Plain minibatch SGD over a fixed sample order; the non-private training core."""
    params = init or ParamMatrix(np.zeros((train.n_classes, train.n_features)), radius=radius, l2=l2)
    curve: list[tuple[int, int, float]] = []
    t = 0
    for start in range(0, len(order) - b + 1, b):
        batch = order[start : start + b]
        grad = mean_gradient(params, train.X[batch], train.y[batch])
        t += 1
        params = sgd_step(params, grad, learning_rate(sched, t))
        if test is not None and (t == 1 or t % eval_every == 0):
            curve.append((t, start + b, error_rate(params, test.X, test.y)))
    if test is not None and (not curve or curve[-1][0] != t):
        curve.append((t, len(order) // b * b, error_rate(params, test.X, test.y)))
    return params, curve


def train_central_sgd_private(
    train: Dataset,
    priv: PrivacySpec,
    b: int,
    sched: LearningRateSchedule,
    l2: float,
    radius: float,
    rng: np.random.Generator,
    test: Dataset | None = None,
    passes: int = 5,
    eval_every: int = 20,
    init: ParamMatrix | None = None,
) -> BaselineResult:
    """Centralized SGD where the server only ever sees perturbed features and labels.

    Test data is never perturbed; the curve reports error on the clean test set.
    """
    noisy = perturb_dataset(train, priv, rng)
    order = np.tile(rng.permutation(len(noisy)), passes)
    params, curve = train_central_sgd(noisy, order, b, sched, l2, radius, test, eval_every, init=init)
    final = curve[-1][2] if curve else math.nan
    return BaselineResult(CENTRAL_SGD_PRIVATE, final, curve, params=params)


def train_decentralized(
    train: Dataset,
    shards: list[np.ndarray],
    sched: LearningRateSchedule,
    l2: float,
    radius: float,
    test: Dataset | None = None,
    passes: int = 5,
) -> BaselineResult:
    """Each device learns alone on its shard (b = 1); reports the mean per-device error.

    The curve is the mean error across devices after each full pass; a device
    with an empty shard contributes chance error.
    """
    chance = 1.0 - 1.0 / train.n_classes
    models: list[ParamMatrix | None] = []
    per_pass_errors: list[list[float]] = [[] for _ in range(passes)]
    for shard in shards:
        if len(shard) == 0:
            models.append(None)
            for p in range(passes):
                per_pass_errors[p].append(chance)
            continue
        params = ParamMatrix(np.zeros((train.n_classes, train.n_features)), radius=radius, l2=l2)
        t = 0
        for p in range(passes):
            for idx in shard:
                t += 1
                grad = average_gradients([train.sample(int(idx))], params)
                params = sgd_step(params, grad, learning_rate(sched, t))
            if test is not None:
                per_pass_errors[p].append(error_rate(params, test.X, test.y))
        models.append(params)

    curve = []
    if test is not None:
        shard_total = sum(len(s) for s in shards)
        curve = [
            (p + 1, shard_total * (p + 1), float(np.mean(per_pass_errors[p])))
            for p in range(passes)
        ]
    final_errors = per_pass_errors[-1] if test is not None else []
    final = float(np.mean(final_errors)) if final_errors else math.nan
    return BaselineResult(
        DECENTRALIZED, final, curve, per_device_errors=final_errors or None
    )
