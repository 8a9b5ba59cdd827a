"""The full episodic classifier: adaptation + backbone + head."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, softmax_cross_entropy
from .backbone import AdaptationNetwork, BackboneConfig, FilmBackbone, FilmParams
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import ConfigurationError
from .episodes import Episode
from .heads import (HEAD_VARIANTS, AdaptiveLinearHead, FixedMetricHead,
                    MahalanobisHead, ProjectedHead, Projection, classify)
from .nn import prefix_params


@dataclass
class HeadConfig:
    """Which head to run and its knobs."""

    variant: str = "mahalanobis"
    beta: float = 1.0
    projection: bool = False
    proj_hidden: int | None = None   # defaults to embed_dim
    proj_dim: int | None = None      # defaults to embed_dim
    pooled_task_cov: bool = False

    def validate(self) -> None:
        if self.variant not in HEAD_VARIANTS:
            raise ConfigurationError(
                f"unknown head variant {self.variant!r}; expected one of "
                f"{HEAD_VARIANTS}")
        if self.beta <= 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}")


def parse_head_spec(spec: str) -> tuple[str, bool]:
    """Parse a head flag like ``mahalanobis``, ``l2`` or ``linear+p``."""
    projection = spec.endswith("+p")
    variant = spec[:-2] if projection else spec
    if variant not in HEAD_VARIANTS:
        raise ConfigurationError(
            f"unknown head {spec!r}; expected one of {HEAD_VARIANTS}, "
            f"optionally with a '+p' suffix")
    return variant, projection


class FewShotClassifier:
    """Backbone + support-conditioned FiLM + a classification head.

    All trainable parameters (backbone, adaptation networks, any head
    networks) live in one flat registry keyed by slash-separated names.
    """

    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: HeadConfig,
                 seed: int = 0):
        backbone_cfg.validate()
        head_cfg.validate()
        self.backbone_cfg = backbone_cfg
        self.head_cfg = head_cfg
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x90de1)))
        self.backbone = FilmBackbone(backbone_cfg, rng)
        self.adaptation = (AdaptationNetwork(backbone_cfg, rng)
                           if backbone_cfg.adapt else None)
        self.head = self._build_head(rng)

    def _build_head(self, rng: np.random.Generator):
        cfg = self.head_cfg
        d = self.backbone_cfg.embed_dim
        if cfg.variant == "mahalanobis":
            inner = MahalanobisHead(cfg.beta, task_reg=True,
                                    pooled_task_cov=cfg.pooled_task_cov)
        elif cfg.variant == "mahalanobis-tr":
            inner = MahalanobisHead(cfg.beta, task_reg=False)
        elif cfg.variant == "linear":
            proj_dim = cfg.proj_dim or d
            inner = AdaptiveLinearHead(proj_dim if cfg.projection else d, rng)
        else:
            inner = FixedMetricHead(cfg.variant)
        if cfg.projection:
            projection = Projection(d, cfg.proj_hidden or d, cfg.proj_dim or d, rng)
            return ProjectedHead(inner, projection)
        return inner

    # -- forward ------------------------------------------------------------

    def embed_episode(self, episode: Episode) -> tuple[Tensor, Tensor]:
        """Task-adapted embeddings for the support and query sets."""
        support_x = Tensor(episode.support_x)
        query_x = Tensor(episode.query_x)
        if self.adaptation is None:
            film = FilmParams.identity(self.backbone_cfg.blocks,
                                       self.backbone_cfg.width)
            sup = self.backbone.extract_features(support_x, film)
        else:
            film, sup = self.adaptation.film_for_support(support_x, self.backbone)
        qry = self.backbone.extract_features(query_x, film)
        return sup, qry

    def episode_logits(self, episode: Episode) -> Tensor:
        sup, qry = self.embed_episode(episode)
        return self.head(sup, episode.support_y, episode.way, qry)

    def episode_loss(self, episode: Episode) -> tuple[Tensor, int]:
        """Summed query cross-entropy and the query count."""
        logits = self.episode_logits(episode)
        return softmax_cross_entropy(logits, episode.query_y), episode.n_queries

    def predict(self, episode: Episode) -> np.ndarray:
        """Class probabilities for each query, shape (n_queries, way)."""
        return classify(self.episode_logits(episode)).data

    # -- parameters and persistence ------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = prefix_params("backbone", self.backbone.parameters())
        if self.adaptation is not None:
            out.update(prefix_params("adapt", self.adaptation.parameters()))
        out.update(prefix_params("head", self.head.parameters()))
        return out

    def component_param_counts(self) -> dict[str, int]:
        """Exact trainable-parameter counts per component plus the total."""
        counts = {"backbone": 0, "adaptation": 0, "head": 0}
        for name, tensor in self.named_parameters().items():
            root = name.split("/", 1)[0]
            key = {"backbone": "backbone", "adapt": "adaptation",
                   "head": "head"}[root]
            counts[key] += tensor.data.size
        counts["total"] = sum(counts.values())
        return counts

    def zero_grads(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()

    def save(self, path, meta: dict | None = None) -> None:
        arrays = {k: v.data for k, v in self.named_parameters().items()}
        save_checkpoint(path, arrays, meta or {})

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            missing = set(params) - set(arrays)
            extra = set(arrays) - set(params)
            raise ConfigurationError(
                f"checkpoint does not match the model (missing {sorted(missing)}, "
                f"unexpected {sorted(extra)})")
        for name, tensor in params.items():
            if arrays[name].shape != tensor.data.shape:
                raise ConfigurationError(
                    f"parameter {name} has shape {arrays[name].shape}, "
                    f"expected {tensor.data.shape}")
            tensor.data = arrays[name].astype(np.float64, copy=True)

    @classmethod
    def load(cls, path, backbone_cfg: BackboneConfig, head_cfg: HeadConfig,
             seed: int = 0) -> tuple["FewShotClassifier", dict]:
        arrays, meta = load_checkpoint(path)
        model = cls(backbone_cfg, head_cfg, seed=seed)
        model.load_parameters(arrays)
        return model, meta

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def last_condition_numbers(self) -> list[float]:
        return list(getattr(self.head, "last_condition_numbers", []))
