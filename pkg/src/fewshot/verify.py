"""Cross-checks wiring the pipeline against the independent oracles.

These are the runnable forms of the package's mathematical contracts:
reverse-mode gradients against central differences, head probabilities
against mixture responsibilities, distances against the generic Bregman
evaluator, and the SPD solve against a dense reference. The ``oracle``
CLI command runs them as a suite; the acceptance tests assert them at
their contract tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, finite_difference_check, spd_solve
from .backbone import BackboneConfig
from .episodes import Episode
from .heads import RegularizedCovariance, classify, mahalanobis_distances
from .model import FewShotClassifier, HeadConfig
from .oracles import (bregman_divergence, gmm_responsibilities_shared,
                      quadratic_form_generator)


def random_spd(rng: np.random.Generator, dim: int, ridge: float = 1.0) -> np.ndarray:
    m = rng.standard_normal((dim, dim))
    return m @ m.T + ridge * np.eye(dim)


def random_episode(rng: np.random.Generator, dim: int, way: int,
                   shot_range=(1, 5), queries: int = 3) -> Episode:
    """Small synthetic episode with raw feature vectors (no dataset pool)."""
    shots = [int(rng.integers(shot_range[0], shot_range[1] + 1)) for _ in range(way)]
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for k in range(way):
        center = rng.uniform(-2, 2, size=dim)
        sup_x.append(center + rng.standard_normal((shots[k], dim)))
        sup_y.append(np.full(shots[k], k))
        qry_x.append(center + rng.standard_normal((queries, dim)))
        qry_y.append(np.full(queries, k))
    n_sup = sum(shots)
    n_qry = way * queries
    return Episode(
        support_x=np.concatenate(sup_x), support_y=np.concatenate(sup_y),
        query_x=np.concatenate(qry_x), query_y=np.concatenate(qry_y),
        class_labels=tuple(range(way)), shots=tuple(shots),
        support_idx=np.arange(n_sup), query_idx=np.arange(n_sup, n_sup + n_qry),
        seed=int(rng.integers(0, 2**31)))


def tiny_model(dim: int, seed: int, variant: str = "mahalanobis",
               beta: float = 1.0, adapt: bool = True,
               autoregressive: bool = False) -> FewShotClassifier:
    """A deliberately small model for gradient checks (d <= 8 everywhere)."""
    backbone = BackboneConfig(input_dim=dim, blocks=2, width=6, embed_dim=4,
                              adapt=adapt, autoregressive=autoregressive,
                              encoder_hidden=6, task_repr_dim=5,
                              adapter_hidden=6, ar_dim=4)
    return FewShotClassifier(backbone, HeadConfig(variant=variant, beta=beta),
                             seed=seed)


def episode_gradient_check(model: FewShotClassifier, episode: Episode,
                           step: float = 1e-5) -> float:
    """Max relative error of the episode-loss gradients vs central differences."""
    params = list(model.named_parameters().values())

    def loss_fn():
        loss, n_q = model.episode_loss(episode)
        return loss * (1.0 / n_q)

    return finite_difference_check(loss_fn, params, step=step)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_gradient_integrity(n_episodes: int = 3, seed: int = 7,
                             tolerance: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_episodes):
        dim = int(rng.integers(3, 6))
        way = int(rng.integers(2, 4))
        model = tiny_model(dim, seed=seed + i)
        episode = random_episode(rng, dim, way)
        worst = max(worst, episode_gradient_check(model, episode))
    return CheckResult("gradient-integrity", worst <= tolerance,
                       f"max_rel_err={worst:.3e} tol={tolerance:.0e}")


def check_responsibility_correspondence(trials: int = 200, seed: int = 11,
                                        tolerance: float = 1e-10) -> CheckResult:
    """Shared covariance + equal weights: head softmax == responsibilities."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, 6))
        k = int(rng.integers(2, 5))
        means = rng.uniform(-3, 3, size=(k, d))
        cov = random_spd(rng, d)
        x = rng.uniform(-3, 3, size=d)
        probs_ref = gmm_responsibilities_shared(x, means, cov)
        queries = Tensor(x[None, :])
        dists = [mahalanobis_distances(queries, Tensor(means[j]),
                                       _fixed_reg(cov)).data[0]
                 for j in range(k)]
        probs = classify(Tensor(-np.array(dists)[None, :])).data[0]
        worst = max(worst, float(np.abs(probs - probs_ref).max()))
    return CheckResult("responsibility-correspondence", worst <= tolerance,
                       f"max_abs_diff={worst:.3e} tol={tolerance:.0e}")


def _fixed_reg(cov: np.ndarray) -> RegularizedCovariance:
    """Wrap a fixed covariance for head-level checks (no blending)."""
    return RegularizedCovariance(q=Tensor(cov), lam=1.0, beta=0.0)


def check_bregman_correspondence(trials: int = 200, seed: int = 13,
                                 tolerance: float = 1e-9) -> CheckResult:
    """Half quadratic-form generator == halved squared Mahalanobis distance."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, 6))
        cov = random_spd(rng, d)
        gen = quadratic_form_generator(cov)
        z = rng.uniform(-3, 3, size=d)
        zp = rng.uniform(-3, 3, size=d)
        div = bregman_divergence(gen, z, zp)
        dist = mahalanobis_distances(Tensor(z[None, :]), Tensor(zp),
                                     _fixed_reg(cov)).data[0]
        worst = max(worst, abs(div - dist))
    return CheckResult("bregman-correspondence", worst <= tolerance,
                       f"max_abs_diff={worst:.3e} tol={tolerance:.0e}")


def check_spd_solve(trials: int = 50, seed: int = 17,
                    tolerance: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, 9))
        a = random_spd(rng, d)
        b = rng.standard_normal((d, int(rng.integers(1, 4))))
        x = spd_solve(Tensor(a), Tensor(b)).data
        residual = np.linalg.norm(a @ x - b) / np.linalg.norm(b)
        worst = max(worst, float(residual))
    return CheckResult("spd-solve-residual", worst <= tolerance,
                       f"max_rel_residual={worst:.3e} tol={tolerance:.0e}")


def invariant_suite(seed: int = 0) -> list[CheckResult]:
    """The quick runnable form of the package's mathematical contracts."""
    return [
        check_gradient_integrity(seed=seed + 7),
        check_responsibility_correspondence(seed=seed + 11),
        check_bregman_correspondence(seed=seed + 13),
        check_spd_solve(seed=seed + 17),
    ]
