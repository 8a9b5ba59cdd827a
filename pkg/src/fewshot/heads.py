"""Classification heads over episode embeddings.

The main head scores a query by one half of its squared Mahalanobis
distance to each class mean, under a per-class covariance blended from the
class-within-task estimate and the all-classes-in-task estimate:

    Q_k = lam(n_k) * Sigma_k + (1 - lam(n_k)) * Sigma_task + beta * I,
    lam(n) = n / (n + 1)

so a one-shot class (whose own covariance estimate is defined as the zero
matrix) leans entirely on the task covariance and the ridge, while a
high-shot class trusts its own estimate. The ``task_reg=False`` variant
drops the task term (lam forced to 1, ridge kept). Logits are the negated
distances and go through a plain softmax; no log-determinant term is added,
so with equal covariances, and only then, the probabilities coincide with
Gaussian-mixture responsibilities.

Baseline heads for ablations: squared Euclidean, L1, cosine, negative dot
product, an adaptive linear head whose weight rows are produced from class
means by a small residual MLP, and a projection wrapper that moves all
statistics into a learned projected space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, absolute, add, cholesky_factor, concat, div, elu,
                       gather_rows, matmul, mul, neg, reshape, scale, softmax,
                       spd_solve, sqrt, sub, tmean, transpose, tsum)
from .datasets import ConfigurationError
from .nn import Linear, prefix_params

METRIC_VARIANTS = ("l2", "l1", "cosine", "dot")
HEAD_VARIANTS = ("mahalanobis", "mahalanobis-tr") + METRIC_VARIANTS + ("linear",)


@dataclass(eq=False)
class ClassStats:
    """Per-class support statistics: shot count, mean, covariance."""

    label: int
    count: int
    mean: Tensor
    cov: Tensor


@dataclass(eq=False)
class TaskStats:
    """All-classes covariance of the support set and its size."""

    cov: Tensor
    count: int


@dataclass(eq=False)
class RegularizedCovariance:
    """Blended, ridge-stabilized class covariance with a cached factor."""

    q: Tensor
    lam: float
    beta: float
    _chol: np.ndarray | None = field(default=None, repr=False)

    @property
    def cholesky(self) -> np.ndarray:
        if self._chol is None:
            self._chol = cholesky_factor(self.q.data)
        return self._chol

    def condition_number(self) -> float:
        if not np.isfinite(self.q.data).all():
            return float("nan")
        try:
            eigs = np.linalg.eigvalsh(0.5 * (self.q.data + self.q.data.T))
        except np.linalg.LinAlgError:
            return float("nan")
        return float(eigs[-1] / eigs[0])


def shot_weight(count: int, task_reg: bool = True) -> float:
    """Blend weight lam(n) = n/(n+1); forced to 1 when the task term is off."""
    if count < 1:
        raise ConfigurationError(f"shot count must be >= 1, got {count}")
    return 1.0 if not task_reg else count / (count + 1.0)


def class_means(embeddings: Tensor, labels: np.ndarray, way: int) -> list[Tensor]:
    """Mean embedding per local class 0..way-1."""
    means = []
    for k in range(way):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            raise ConfigurationError(f"class {k} has no support examples")
        means.append(tmean(gather_rows(embeddings, idx), axis=0))
    return means


def class_covariance(embeddings_k: Tensor, mean_k: Tensor) -> Tensor:
    """(n-1)-normalized sample covariance; the zero matrix for one shot."""
    n, d = embeddings_k.data.shape
    if n < 1:
        raise ConfigurationError("class covariance needs at least one example")
    if n == 1:
        return Tensor(np.zeros((d, d)))
    centered = sub(embeddings_k, mean_k)
    return scale(matmul(transpose(centered), centered), 1.0 / (n - 1))


def task_covariance(embeddings: Tensor) -> Tensor:
    """Covariance of all support embeddings about the global support mean."""
    n = embeddings.data.shape[0]
    if n < 2:
        raise ConfigurationError("task covariance needs at least two examples")
    centered = sub(embeddings, tmean(embeddings, axis=0))
    return scale(matmul(transpose(centered), centered), 1.0 / (n - 1))


def pooled_task_covariance(embeddings: Tensor, labels: np.ndarray,
                           way: int) -> Tensor:
    """Pooled within-class covariance (deviations about each class mean).

    Alternative reading of the all-classes estimate, kept behind a flag for
    comparison with the default global-centering estimator.
    """
    n = embeddings.data.shape[0]
    if n <= way:
        raise ConfigurationError(
            f"pooled covariance needs more examples ({n}) than classes ({way})")
    parts = []
    for k in range(way):
        idx = np.flatnonzero(labels == k)
        rows = gather_rows(embeddings, idx)
        parts.append(sub(rows, tmean(rows, axis=0)))
    centered = concat(parts, axis=0)
    return scale(matmul(transpose(centered), centered), 1.0 / (n - way))


def episode_stats(support_emb: Tensor, support_y: np.ndarray, way: int,
                  pooled: bool = False) -> tuple[list[ClassStats], TaskStats]:
    """Class means/covariances plus the all-classes covariance."""
    means = class_means(support_emb, support_y, way)
    stats = []
    for k in range(way):
        idx = np.flatnonzero(support_y == k)
        emb_k = gather_rows(support_emb, idx)
        stats.append(ClassStats(label=k, count=idx.size, mean=means[k],
                                cov=class_covariance(emb_k, means[k])))
    if pooled:
        task_cov = pooled_task_covariance(support_emb, support_y, way)
    else:
        task_cov = task_covariance(support_emb)
    return stats, TaskStats(cov=task_cov, count=support_emb.data.shape[0])


def blend_covariance(cov_k: Tensor, cov_task: Tensor | None, count: int,
                     beta: float, task_reg: bool = True) -> RegularizedCovariance:
    """Q_k = lam Sigma_k + (1 - lam) Sigma_task + beta I (SPD for beta > 0)."""
    if beta <= 0:
        raise ConfigurationError(f"ridge beta must be positive, got {beta}")
    lam = shot_weight(count, task_reg)
    d = cov_k.data.shape[0]
    ridge = Tensor(beta * np.eye(d))
    if task_reg:
        if cov_task is None:
            raise ConfigurationError("task covariance required when task_reg is on")
        blended = add(add(scale(cov_k, lam), scale(cov_task, 1.0 - lam)), ridge)
    else:
        blended = add(cov_k, ridge)
    return RegularizedCovariance(q=blended, lam=lam, beta=beta)


def mahalanobis_distances(queries: Tensor, mean: Tensor,
                          reg: RegularizedCovariance) -> Tensor:
    """Half squared Mahalanobis distance of each query to one class mean.

    Solved through the Cholesky factorization of Q (never an explicit
    inverse); differentiable w.r.t. queries, the mean, and Q.
    """
    z = sub(queries, mean)
    zt = transpose(z)
    y = spd_solve(reg.q, zt)
    return scale(tsum(mul(zt, y), axis=0), 0.5)


def mahalanobis_logits(queries: Tensor, stats: list[ClassStats],
                       regs: list[RegularizedCovariance]) -> Tensor:
    """Per-class negated distances, shape (n_queries, way)."""
    m = queries.data.shape[0]
    cols = [reshape(mahalanobis_distances(queries, s.mean, r), (m, 1))
            for s, r in zip(stats, regs)]
    return neg(concat(cols, axis=1))


def classify(logits: Tensor) -> Tensor:
    """Softmax class probabilities.

    Rejects non-finite logits. Downstream argmax breaks ties toward the
    lowest class index.
    """
    if logits.data.shape[-1] < 2:
        raise ConfigurationError("classification needs at least two classes")
    return softmax(logits, axis=-1)


def metric_logits(variant: str, queries: Tensor, means: list[Tensor]) -> Tensor:
    """Fixed-metric logits; larger always means more likely.

    Distances (l2, l1) are negated; similarities (cosine, dot) are used
    as-is.
    """
    if variant not in METRIC_VARIANTS:
        raise ConfigurationError(f"unknown metric variant {variant!r}")
    m, d = queries.data.shape
    if variant in ("l2", "l1"):
        cols = []
        for mean in means:
            z = sub(queries, mean)
            dist = tsum(mul(z, z) if variant == "l2" else absolute(z), axis=1)
            cols.append(reshape(dist, (m, 1)))
        return neg(concat(cols, axis=1))
    mean_mat = concat([reshape(mu, (d, 1)) for mu in means], axis=1)
    sims = matmul(queries, mean_mat)
    if variant == "dot":
        return sims
    q_norm = sqrt(tsum(mul(queries, queries), axis=1, keepdims=True))
    m_norm = sqrt(tsum(mul(mean_mat, mean_mat), axis=0, keepdims=True))
    if q_norm.data.min() == 0.0 or m_norm.data.min() == 0.0:
        raise ConfigurationError("cosine similarity undefined for zero-norm vectors")
    return div(div(sims, q_norm), m_norm)


# ---------------------------------------------------------------------------
# Head modules (uniform call signature used by the classifier)


class MahalanobisHead:
    """Deterministic covariance-blended distance head; zero parameters."""

    def __init__(self, beta: float = 1.0, task_reg: bool = True,
                 pooled_task_cov: bool = False):
        if beta <= 0:
            raise ConfigurationError(f"ridge beta must be positive, got {beta}")
        self.beta = beta
        self.task_reg = task_reg
        self.pooled_task_cov = pooled_task_cov
        self.last_condition_numbers: list[float] = []

    def __call__(self, support_emb: Tensor, support_y: np.ndarray, way: int,
                 queries: Tensor) -> Tensor:
        stats, task = episode_stats(support_emb, support_y, way,
                                    pooled=self.pooled_task_cov)
        regs = [blend_covariance(s.cov, task.cov, s.count, self.beta,
                                 task_reg=self.task_reg) for s in stats]
        self.last_condition_numbers = [r.condition_number() for r in regs]
        return mahalanobis_logits(queries, stats, regs)

    def parameters(self) -> dict[str, Tensor]:
        return {}


class FixedMetricHead:
    """Distance/similarity to class means under a fixed metric; no parameters."""

    def __init__(self, variant: str):
        if variant not in METRIC_VARIANTS:
            raise ConfigurationError(f"unknown metric variant {variant!r}")
        self.variant = variant

    def __call__(self, support_emb: Tensor, support_y: np.ndarray, way: int,
                 queries: Tensor) -> Tensor:
        means = class_means(support_emb, support_y, way)
        return metric_logits(self.variant, queries, means)

    def parameters(self) -> dict[str, Tensor]:
        return {}


class AdaptiveLinearHead:
    """Task-adapted linear classifier: softmax(W f + b).

    Row k of [W | b] is produced from the class mean by a three-layer MLP
    with a residual connection from the input to the last hidden layer:

        h1 = elu(fc1(mu)); h2 = elu(fc2(h1)); out = fc3(h2 + mu)
    """

    def __init__(self, embed_dim: int, rng: np.random.Generator):
        self.embed_dim = embed_dim
        self.fc1 = Linear(embed_dim, embed_dim, rng)
        self.fc2 = Linear(embed_dim, embed_dim, rng)
        self.fc3 = Linear(embed_dim, embed_dim + 1, rng)

    def weight_row(self, mean: Tensor) -> Tensor:
        row = reshape(mean, (1, self.embed_dim))
        h1 = elu(self.fc1(row))
        h2 = elu(self.fc2(h1))
        return self.fc3(add(h2, row))

    def __call__(self, support_emb: Tensor, support_y: np.ndarray, way: int,
                 queries: Tensor) -> Tensor:
        means = class_means(support_emb, support_y, way)
        wb = concat([self.weight_row(mu) for mu in means], axis=0)
        m = queries.data.shape[0]
        augmented = concat([queries, Tensor(np.ones((m, 1)))], axis=1)
        return matmul(augmented, transpose(wb))

    def parameters(self) -> dict[str, Tensor]:
        return {**prefix_params("fc1", self.fc1.parameters()),
                **prefix_params("fc2", self.fc2.parameters()),
                **prefix_params("fc3", self.fc3.parameters())}


class Projection:
    """Three-matrix projection w1 elu(w2 elu(w3 x)), no biases."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int,
                 rng: np.random.Generator):
        self.w3 = Tensor(rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden)),
                         requires_grad=True)
        self.w2 = Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden, hidden)),
                         requires_grad=True)
        self.w1 = Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden, out_dim)),
                         requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(elu(matmul(elu(matmul(x, self.w3)), self.w2)), self.w1)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "w2": self.w2, "w3": self.w3}


class ProjectedHead:
    """Applies a learned projection to support and query embeddings, then an
    inner head; all class statistics live in the projected space."""

    def __init__(self, inner, projection: Projection):
        self.inner = inner
        self.projection = projection

    def __call__(self, support_emb: Tensor, support_y: np.ndarray, way: int,
                 queries: Tensor) -> Tensor:
        return self.inner(self.projection(support_emb), support_y, way,
                          self.projection(queries))

    def parameters(self) -> dict[str, Tensor]:
        out = prefix_params("proj", self.projection.parameters())
        out.update(prefix_params("inner", self.inner.parameters()))
        return out

    @property
    def last_condition_numbers(self):
        return getattr(self.inner, "last_condition_numbers", [])
