"""Slow, independent reference implementations used to anchor correctness.

Nothing here shares linear-algebra code with the rest of the package: the
inverse is a hand-rolled Gauss-Jordan elimination, the covariance is an
explicit two-pass loop, and probability normalization is written out
directly. Independence is the point; these functions exist to cross-check
the fast pipeline, not to be fast themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class SingularMatrixError(ValueError):
    """Gauss-Jordan elimination hit a zero pivot."""


def dense_reference_inverse(a) -> np.ndarray:
    """Matrix inverse by Gauss-Jordan elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {a.shape}")
    aug = np.hstack([a, np.eye(n)])
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[pivot_row, col]) < 1e-300:
            raise SingularMatrixError(f"zero pivot in column {col}")
        if pivot_row != col:
            aug[[col, pivot_row]] = aug[[pivot_row, col]]
        aug[col] = aug[col] / aug[col, col]
        for row in range(n):
            if row != col:
                aug[row] = aug[row] - aug[row, col] * aug[col]
    return aug[:, n:]


def dense_reference_solve(a, b) -> np.ndarray:
    """Solve A x = b through the explicit Gauss-Jordan inverse."""
    inv = dense_reference_inverse(a)
    return inv @ np.asarray(b, dtype=np.float64)


def dense_reference_logdet(a) -> float:
    """log |det A| for positive definite A, via LU-style elimination."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    logdet = 0.0
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[pivot_row, col]) < 1e-300:
            raise SingularMatrixError(f"zero pivot in column {col}")
        if pivot_row != col:
            a[[col, pivot_row]] = a[[pivot_row, col]]
        logdet += np.log(abs(a[col, col]))
        for row in range(col + 1, n):
            a[row] = a[row] - (a[row, col] / a[col, col]) * a[col]
    return logdet


def dense_reference_covariance(points) -> np.ndarray:
    """Two-pass (n-1)-normalized sample covariance with explicit loops."""
    pts = np.asarray(points, dtype=np.float64)
    n, d = pts.shape
    if n < 2:
        raise ValueError("covariance needs at least two points")
    mean = np.zeros(d)
    for i in range(n):
        mean += pts[i]
    mean /= n
    cov = np.zeros((d, d))
    for i in range(n):
        delta = pts[i] - mean
        cov += np.outer(delta, delta)
    return cov / (n - 1)


def reference_softmax(values) -> np.ndarray:
    """Plain exp-and-normalize with a max shift, written out by hand."""
    v = np.asarray(values, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Gaussian mixture responsibilities


@dataclass(eq=False)
class GaussianMixtureRef:
    """Ground-truth mixture: component means, covariances, mixing weights."""

    means: np.ndarray            # (K, d)
    covariances: np.ndarray      # (K, d, d)
    weights: np.ndarray = field(default=None)  # (K,), defaults to uniform

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        k = self.means.shape[0]
        if self.weights is None:
            self.weights = np.full(k, 1.0 / k)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixing weights must be nonnegative and sum to 1")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


def _log_gaussian(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    d = mean.shape[0]
    delta = x - mean
    inv = dense_reference_inverse(cov)
    quad = float(delta @ inv @ delta)
    logdet = dense_reference_logdet(cov)
    return -0.5 * (quad + logdet + d * np.log(2.0 * np.pi))


def gmm_responsibilities(query, mixture: GaussianMixtureRef) -> np.ndarray:
    """Posterior component probabilities with per-component covariances.

    Uses full normal densities including normalization constants, so the
    result differs from a bare softmax over quadratic forms whenever the
    component covariances differ.
    """
    x = np.asarray(query, dtype=np.float64)
    logs = np.array([
        np.log(mixture.weights[k]) + _log_gaussian(x, mixture.means[k],
                                                   mixture.covariances[k])
        for k in range(mixture.n_components)
    ])
    return reference_softmax(logs)


def gmm_responsibilities_shared(query, means, cov, weights=None) -> np.ndarray:
    """Responsibilities when every component uses one shared covariance."""
    means = np.asarray(means, dtype=np.float64)
    covs = np.repeat(np.asarray(cov, dtype=np.float64)[None], means.shape[0], axis=0)
    return gmm_responsibilities(query, GaussianMixtureRef(means, covs, weights))


# ---------------------------------------------------------------------------
# Bregman divergences


@dataclass
class BregmanGenerator:
    """A convex function and its gradient, defining a Bregman divergence."""

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]

    def check_midpoint_convexity(self, rng: np.random.Generator, dim: int,
                                 trials: int = 100, span: float = 3.0) -> None:
        for _ in range(trials):
            z = rng.uniform(-span, span, size=dim)
            zp = rng.uniform(-span, span, size=dim)
            mid = self.value(0.5 * (z + zp))
            if mid > 0.5 * (self.value(z) + self.value(zp)) + 1e-12:
                raise ValueError("generator failed the midpoint convexity check")


def bregman_divergence(gen: BregmanGenerator, z, zp) -> float:
    """D_F(z, z') = F(z) - F(z') - grad F(z') . (z - z')."""
    z = np.asarray(z, dtype=np.float64)
    zp = np.asarray(zp, dtype=np.float64)
    return gen.value(z) - gen.value(zp) - float(gen.gradient(zp) @ (z - zp))


def quadratic_form_generator(cov) -> BregmanGenerator:
    """F(x) = x^T cov^-1 x / 2; its Bregman divergence is the halved
    squared Mahalanobis distance under ``cov``."""
    inv = dense_reference_inverse(cov)

    def value(x: np.ndarray) -> float:
        return 0.5 * float(x @ inv @ x)

    def gradient(x: np.ndarray) -> np.ndarray:
        return inv @ x

    return BregmanGenerator(value, gradient)


# ---------------------------------------------------------------------------
# Bayes-optimal accuracy on synthetic mixtures


def _component_log_densities(queries: np.ndarray, mixture: GaussianMixtureRef) -> np.ndarray:
    n = queries.shape[0]
    k = mixture.n_components
    d = mixture.means.shape[1]
    logs = np.empty((n, k))
    for j in range(k):
        inv = dense_reference_inverse(mixture.covariances[j])
        logdet = dense_reference_logdet(mixture.covariances[j])
        delta = queries - mixture.means[j]
        quad = np.einsum("ni,ij,nj->n", delta, inv, delta)
        logs[:, j] = (np.log(mixture.weights[j])
                      - 0.5 * (quad + logdet + d * np.log(2.0 * np.pi)))
    return logs


def sample_from_mixture(mixture: GaussianMixtureRef, n: int,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (points, component indices) from the ground-truth mixture."""
    comps = rng.choice(mixture.n_components, size=n, p=mixture.weights)
    d = mixture.means.shape[1]
    points = np.empty((n, d))
    for j in range(mixture.n_components):
        mask = comps == j
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        chol = np.linalg.cholesky(mixture.covariances[j])
        z = rng.standard_normal((cnt, d))
        points[mask] = mixture.means[j] + z @ chol.T
    return points, comps


def bayes_optimal_accuracy(mixture: GaussianMixtureRef, n_queries: int = 100_000,
                           seed: int = 0) -> tuple[float, float]:
    """Accuracy of the true-parameter quadratic discriminant, with binomial CI.

    Monte-Carlo queries are drawn from the mixture itself and classified by
    the exact Gaussian class posteriors; this is the accuracy ceiling no
    estimator-based head can systematically exceed.
    """
    rng = np.random.default_rng(seed)
    points, labels = sample_from_mixture(mixture, n_queries, rng)
    logs = _component_log_densities(points, mixture)
    predicted = logs.argmax(axis=1)
    acc = float((predicted == labels).mean())
    ci = float(1.96 * np.sqrt(acc * (1.0 - acc) / n_queries))
    return acc, ci


def nearest_mean_accuracy(mixture: GaussianMixtureRef, n_queries: int = 100_000,
                          seed: int = 0) -> tuple[float, float]:
    """Accuracy of the isotropic discriminant (nearest true mean).

    The covariance-blind ceiling: the best any Euclidean-metric classifier
    with perfect mean knowledge could do. The spread between this and
    ``bayes_optimal_accuracy`` measures how much class-covariance structure
    is worth on a given family.
    """
    rng = np.random.default_rng(seed)
    points, labels = sample_from_mixture(mixture, n_queries, rng)
    d2 = ((points[:, None, :] - mixture.means[None, :, :]) ** 2).sum(axis=2)
    predicted = d2.argmin(axis=1)
    acc = float((predicted == labels).mean())
    ci = float(1.96 * np.sqrt(acc * (1.0 - acc) / n_queries))
    return acc, ci
