"""Task-adaptable feature extractor: residual blocks modulated by FiLM.

The backbone is a stack of dense residual blocks; inside each block the
pre-activation is scaled and shifted by per-block FiLM vectors (gamma,
beta). Those vectors come from an adaptation network conditioned on the
support set: a permutation-invariant task encoder feeds one small adapter
per block. The autoregressive variant additionally summarizes the support
set as it flows through the already-adapted earlier blocks and feeds that
summary to the later adapters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat, elu, matmul, mul, reshape, set_mean
from .datasets import ConfigurationError
from .nn import MLP, Linear, prefix_params


@dataclass
class BackboneConfig:
    """Shape of the feature extractor and its adaptation networks."""

    input_dim: int = 16
    blocks: int = 3
    width: int = 64
    embed_dim: int = 64
    adapt: bool = True
    autoregressive: bool = False
    encoder_hidden: int = 64
    task_repr_dim: int = 64
    adapter_hidden: int = 64
    ar_dim: int = 32

    def validate(self) -> None:
        if self.blocks < 1:
            raise ConfigurationError(f"blocks must be >= 1, got {self.blocks}")
        if self.embed_dim < 2:
            raise ConfigurationError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.input_dim < 1 or self.width < 1:
            raise ConfigurationError("input_dim and width must be positive")
        if self.autoregressive and not self.adapt:
            raise ConfigurationError("autoregressive mode requires adaptation")


@dataclass
class FilmParams:
    """Per-block scale/shift vectors; one (gamma, beta) pair per block."""

    gammas: list[Tensor]
    betas: list[Tensor]

    @classmethod
    def identity(cls, blocks: int, width: int) -> "FilmParams":
        return cls(gammas=[Tensor(np.ones(width)) for _ in range(blocks)],
                   betas=[Tensor(np.zeros(width)) for _ in range(blocks)])

    def __post_init__(self):
        if len(self.gammas) != len(self.betas):
            raise ConfigurationError("gamma/beta block counts differ")


class ResidualBlock:
    """x + W2 elu(gamma * (x W1 + b1) + beta) + b2, FiLM on the pre-activation."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.fc_in = Linear(width, width, rng)
        self.fc_out = Linear(width, width, rng)

    def __call__(self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        pre = self.fc_in(x)
        modulated = add(mul(gamma, pre), beta)
        return add(x, self.fc_out(elu(modulated)))

    def parameters(self) -> dict[str, Tensor]:
        return {**prefix_params("in", self.fc_in.parameters()),
                **prefix_params("out", self.fc_out.parameters())}


class FilmBackbone:
    """Stem -> FiLM residual blocks -> linear embedding head."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.stem = Linear(config.input_dim, config.width, rng)
        self.blocks = [ResidualBlock(config.width, rng) for _ in range(config.blocks)]
        self.head = Linear(config.width, config.embed_dim, rng)

    def stem_forward(self, x: Tensor) -> Tensor:
        return elu(self.stem(x))

    def block_forward(self, index: int, h: Tensor, film: FilmParams) -> Tensor:
        return self.blocks[index](h, film.gammas[index], film.betas[index])

    def extract_features(self, x: Tensor, film: FilmParams) -> Tensor:
        """Embed (n, input_dim) vectors under the given modulation."""
        if x.data.ndim != 2 or x.data.shape[1] != self.config.input_dim:
            raise ConfigurationError(
                f"expected (n, {self.config.input_dim}) inputs, got {x.data.shape}")
        if len(film.gammas) != self.config.blocks:
            raise ConfigurationError(
                f"film has {len(film.gammas)} blocks, backbone has "
                f"{self.config.blocks}")
        h = self.stem_forward(x)
        for i in range(self.config.blocks):
            h = self.block_forward(i, h, film)
        return self.head(h)

    def parameters(self) -> dict[str, Tensor]:
        out = prefix_params("stem", self.stem.parameters())
        for i, block in enumerate(self.blocks):
            out.update(prefix_params(f"block{i}", block.parameters()))
        out.update(prefix_params("head", self.head.parameters()))
        return out


class TaskEncoder:
    """Permutation-invariant support-set encoder: per-example MLP, mean pool.

    Pooling uses a canonical summation order, so the representation is
    bit-identical under any permutation of the support set.
    """

    def __init__(self, input_dim: int, hidden: int, repr_dim: int,
                 rng: np.random.Generator):
        self.net = MLP([input_dim, hidden, repr_dim], rng)

    def __call__(self, support_x: Tensor) -> Tensor:
        if support_x.data.shape[0] < 1:
            raise ConfigurationError("task encoder needs a nonempty support set")
        return set_mean(self.net(support_x))

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters()


class BlockAdapter:
    """Generates one block's (gamma, beta) from the task representation.

    gamma is parameterized as 1 + delta with a small-scale output layer, so
    modulation starts near the identity without being exactly dead.
    """

    _NEAR_IDENTITY_SCALE = 1e-2

    def __init__(self, in_dim: int, hidden: int, width: int,
                 rng: np.random.Generator):
        self.trunk = Linear(in_dim, hidden, rng)
        self.gamma_head = Linear(hidden, width, rng, w_scale=self._NEAR_IDENTITY_SCALE)
        self.beta_head = Linear(hidden, width, rng, w_scale=self._NEAR_IDENTITY_SCALE)

    def __call__(self, task_repr: Tensor) -> tuple[Tensor, Tensor]:
        h = elu(self.trunk(_as_row(task_repr)))
        gamma = add(_as_vector(self.gamma_head(h)), Tensor(1.0))
        beta = _as_vector(self.beta_head(h))
        return gamma, beta

    def parameters(self) -> dict[str, Tensor]:
        return {**prefix_params("trunk", self.trunk.parameters()),
                **prefix_params("gamma", self.gamma_head.parameters()),
                **prefix_params("beta", self.beta_head.parameters())}


def _as_row(v: Tensor) -> Tensor:
    return reshape(v, (1, v.data.shape[-1])) if v.data.ndim == 1 else v

def _as_vector(m: Tensor) -> Tensor:
    return reshape(m, (m.data.shape[-1],))


class AdaptationNetwork:
    """Support-conditioned FiLM generator (task encoder + per-block adapters).

    In autoregressive mode, adapters for blocks 2..J also receive a pooled
    summary of the support set pushed through the already-adapted earlier
    blocks; block 1 sees only the task representation, so a one-block
    autoregressive network coincides with the plain one.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.encoder = TaskEncoder(config.input_dim, config.encoder_hidden,
                                   config.task_repr_dim, rng)
        self.adapters = []
        self.ar_encoders = []
        for j in range(config.blocks):
            in_dim = config.task_repr_dim
            if config.autoregressive and j > 0:
                in_dim += config.ar_dim
            self.adapters.append(
                BlockAdapter(in_dim, config.adapter_hidden, config.width, rng))
        if config.autoregressive:
            for _ in range(max(config.blocks - 1, 0)):
                self.ar_encoders.append(
                    _SetSummarizer(config.width, config.encoder_hidden,
                                   config.ar_dim, rng))

    def encode_task(self, support_x: Tensor) -> Tensor:
        return self.encoder(support_x)

    def generate_film(self, task_repr: Tensor,
                      ar_summaries: list[Tensor] | None = None) -> FilmParams:
        """Produce FiLM parameters from the task representation.

        ``ar_summaries`` holds one pooled summary per block after the first
        (autoregressive mode only).
        """
        if ar_summaries is not None and not self.config.autoregressive:
            raise ConfigurationError(
                "ar summaries supplied but autoregressive mode is off")
        if self.config.autoregressive:
            expected = self.config.blocks - 1
            got = 0 if ar_summaries is None else len(ar_summaries)
            if got != expected:
                raise ConfigurationError(
                    f"autoregressive mode needs {expected} summaries, got {got}")
        gammas, betas = [], []
        for j, adapter in enumerate(self.adapters):
            if self.config.autoregressive and j > 0:
                inp = concat([task_repr, ar_summaries[j - 1]], axis=0)
            else:
                inp = task_repr
            gamma, beta = adapter(inp)
            gammas.append(gamma)
            betas.append(beta)
        return FilmParams(gammas, betas)

    def film_for_support(self, support_x: Tensor,
                         backbone: FilmBackbone) -> tuple[FilmParams, Tensor]:
        """Compute FiLM params and the adapted support features in one pass.

        Returns (film, support embeddings). The support push through
        the partially adapted blocks is what the autoregressive summaries
        are built from; in plain mode the push only serves the returned
        embeddings.
        """
        task_repr = self.encode_task(support_x)
        gammas, betas = [], []
        h = backbone.stem_forward(support_x)
        for j, adapter in enumerate(self.adapters):
            if self.config.autoregressive and j > 0:
                summary = self.ar_encoders[j - 1](h)
                inp = concat([task_repr, summary], axis=0)
            else:
                inp = task_repr
            gamma, beta = adapter(inp)
            gammas.append(gamma)
            betas.append(beta)
            h = backbone.blocks[j](h, gamma, beta)
        film = FilmParams(gammas, betas)
        return film, backbone.head(h)

    def parameters(self) -> dict[str, Tensor]:
        out = prefix_params("encoder", self.encoder.parameters())
        for j, adapter in enumerate(self.adapters):
            out.update(prefix_params(f"adapter{j}", adapter.parameters()))
        for j, enc in enumerate(self.ar_encoders):
            out.update(prefix_params(f"ar{j + 1}", enc.parameters()))
        return out


class _SetSummarizer:
    """Pooled block-level set encoder for the autoregressive variant."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int,
                 rng: np.random.Generator):
        self.net = MLP([in_dim, hidden, out_dim], rng)

    def __call__(self, features: Tensor) -> Tensor:
        return set_mean(self.net(features))

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters()
