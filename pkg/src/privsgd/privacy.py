"""Local sanitization mechanisms and the deterministic RNG streams they draw from.

Budgets are per transmitted quantity: eps_g for the averaged gradient, eps_e
for the misclassification count, eps_yk for each label count, and eps_x /
eps_y for the centralized baseline's feature and label perturbation. A budget
of None disables the corresponding mechanism (identity, no randomness
consumed), which models running the system with privacy switched off.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from math import ceil, exp

import numpy as np

from .model import ParamMatrix, Sample
from .optim import average_gradients

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *path) -> int:
    """Fold a master seed and a path of ints/strings into a child seed.

    Platform-independent (splitmix-style mixing, crc32 for strings), so a run
    recorded by its derived seed can be re-executed in isolation.
    """
    s = _splitmix64(master & _MASK64)
    for word in path:
        if isinstance(word, str):
            word = zlib.crc32(word.encode())
        s = _splitmix64(s ^ (int(word) & _MASK64))
    return s


@dataclass(frozen=True)
class RngStream:
    """Named random stream: identical (seed, stream) gives the identical sequence."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.seed, self.stream))))


@dataclass(frozen=True)
class PrivacySpec:
    """Per-quantity privacy budgets; None disables that mechanism entirely."""

    eps_g: float | None = None
    eps_e: float | None = None
    eps_yk: float | None = None
    eps_x: float | None = None
    eps_y: float | None = None

    def __post_init__(self):
        for name in ("eps_g", "eps_e", "eps_yk", "eps_x", "eps_y"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive or None, got {v}")

    @classmethod
    def disabled(cls) -> "PrivacySpec":
        return cls()

    @classmethod
    def from_eps_inv(cls, eps_inv: float, counts_eps: float = 0.1) -> "PrivacySpec":
        """Budgets for a paper-style run specified by 1/eps (0 means no privacy).

        The gradient carries the full budget eps = 1/eps_inv; the progress
        counts get the small fixed counts_eps each; the centralized baseline
        splits the same eps evenly between features and labels.
        """
        if eps_inv == 0:
            return cls.disabled()
        eps = 1.0 / eps_inv
        return cls(eps_g=eps, eps_e=counts_eps, eps_yk=counts_eps, eps_x=eps / 2, eps_y=eps / 2)


def laplace_noise(scale: float, rng: np.random.Generator, size=None):
    """Zero-mean Laplace draw(s) with the given scale, by inverse CDF.

    One uniform per coordinate: u on (-1/2, 1/2), z = scale * sign(u) * ln(1 - 2|u|).
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    u = rng.random(size) - 0.5
    # rng.random can return exactly -0.5 after the shift; log1p(-1) would be -inf
    while np.any(u == -0.5):
        u = np.where(u == -0.5, rng.random() - 0.5, u)
    return scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def laplace_sample(scale: float, rng: np.random.Generator) -> float:
    return float(laplace_noise(scale, rng))


def sanitize_gradient(
    grad: np.ndarray, eps_g: float | None, batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Element-wise Laplace noise at scale 4 / (eps_g * batch_size).

    batch_size is the number of samples actually averaged (the sensitivity of
    an n-sample averaged gradient is 4/n). Disabled budget returns the input
    untouched.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if eps_g is None:
        return grad
    scale = 4.0 / (eps_g * batch_size)
    return grad + laplace_noise(scale, rng, size=grad.shape)


def discrete_laplace_pmf(z: int, eps: float) -> float:
    """P(Z = z) for the integer-valued noise with pmf proportional to exp(-eps|z|/2)."""
    p = exp(-eps / 2.0)
    return (1.0 - p) / (1.0 + p) * p ** abs(z)


def discrete_laplace_variance(eps: float) -> float:
    p = exp(-eps / 2.0)
    return 2.0 * p / (1.0 - p) ** 2


def discrete_laplace_noise(eps: float, rng: np.random.Generator, size=None):
    """Difference of two geometric failure counts, pmf ((1-p)/(1+p)) p^|z|, p = e^(-eps/2).

    numpy's geometric() counts trials (support 1, 2, ...); subtracting the two
    counts cancels the offset.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    p = exp(-eps / 2.0)
    g1 = rng.geometric(1.0 - p, size)
    g2 = rng.geometric(1.0 - p, size)
    return g1 - g2


def discrete_laplace_sample(eps: float, rng: np.random.Generator) -> int:
    return int(discrete_laplace_noise(eps, rng))


def sanitize_count(n: int, eps: float | None, rng: np.random.Generator) -> int:
    """Count plus discrete-Laplace noise; never clamped, so the result may be negative."""
    if eps is None:
        return int(n)
    return int(n) + discrete_laplace_sample(eps, rng)


def perturb_features(x: np.ndarray, eps_x: float | None, rng: np.random.Generator) -> np.ndarray:
    """Element-wise Laplace noise at scale 2/eps_x (identity-release sensitivity 2)."""
    if eps_x is None:
        return x
    return x + laplace_noise(2.0 / eps_x, rng, size=x.shape)


def label_keep_prob(n_classes: int, eps_y: float) -> float:
    """Probability the exponential mechanism reports the true label unchanged."""
    # e^(eps/2) / (e^(eps/2) + C - 1), written to stay finite for large eps
    return 1.0 / (1.0 + (n_classes - 1) * exp(-eps_y / 2.0))


def label_transition_prob(reported: int, true: int, n_classes: int, eps_y: float) -> float:
    """P(reported | true) under the label-perturbation mechanism."""
    keep = label_keep_prob(n_classes, eps_y)
    return keep if reported == true else (1.0 - keep) / (n_classes - 1)


def perturb_label(y: int, n_classes: int, eps_y: float | None, rng: np.random.Generator) -> int:
    """Exponential mechanism over class labels with an indicator score."""
    if y >= n_classes:
        raise ValueError(f"label {y} out of range for {n_classes} classes")
    if eps_y is None:
        return y
    if rng.random() < label_keep_prob(n_classes, eps_y):
        return y
    other = int(rng.integers(n_classes - 1))
    return other if other < y else other + 1


def gradient_sensitivity_check(
    b: int,
    trials: int,
    rng: np.random.Generator,
    n_classes: int = 3,
    n_features: int = 10,
    radius: float = 100.0,
) -> float:
    """Max L1 gradient deviation over random adjacent minibatch pairs.

    Each trial draws a random parameter matrix inside the ball and a size-b
    minibatch with ||x||_1 <= 1, replaces one sample, and measures the L1
    distance between the two averaged gradients (l2 = 0 so the regularizer
    cancels). The returned maximum is bounded by 4/b.
    """
    if b < 1:
        raise ValueError(f"b must be >= 1, got {b}")

    def random_unit_l1(scale: float) -> np.ndarray:
        v = rng.standard_normal(n_features)
        return v / np.abs(v).sum() * scale

    worst = 0.0
    for _ in range(trials):
        w = rng.standard_normal((n_classes, n_features))
        w *= rng.random() * radius / np.linalg.norm(w)
        params = ParamMatrix(w, radius=radius, l2=0.0)
        batch = [
            Sample(random_unit_l1(rng.random()), int(rng.integers(n_classes)))
            for _ in range(b)
        ]
        swapped = list(batch)
        swapped[0] = Sample(random_unit_l1(rng.random()), int(rng.integers(n_classes)))
        dev = np.abs(average_gradients(batch, params) - average_gradients(swapped, params)).sum()
        worst = max(worst, float(dev))
    return worst


def holdout_size(fraction: float, n: int) -> int:
    """ceil(fraction * n), capped so at least one sample stays in the gradient."""
    if not 0 <= fraction < 1:
        raise ValueError(f"holdout fraction must be in [0, 1), got {fraction}")
    if fraction == 0:
        return 0
    return min(ceil(fraction * n), n - 1)
