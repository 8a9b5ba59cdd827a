"""Episodic meta-training with Adam and best-on-validation checkpointing.

Per batch: each episode runs forward/backward independently (read-only
parameters), per-episode gradients are summed in episode order and divided
by the batch's total query count, then one optimizer step is applied. The
reduction order is fixed, so single-worker runs are bit-reproducible and
multi-worker runs reduce identically once all episodes complete.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .datasets import ConfigurationError, LabeledDataset
from .episodes import Episode, EpisodeProtocol, stream_episode
from .model import FewShotClassifier


class TrainingDivergedError(RuntimeError):
    """The batch loss went non-finite; carries episode/head diagnostics."""

    def __init__(self, message, episode_seeds, head_variant, condition_numbers):
        detail = (f"{message} (episodes {episode_seeds}, head {head_variant}, "
                  f"covariance condition numbers {condition_numbers})")
        super().__init__(detail)
        self.episode_seeds = episode_seeds
        self.head_variant = head_variant
        self.condition_numbers = condition_numbers


@dataclass
class TrainConfig:
    """Optimization schedule; defaults are the desk-scale preset."""

    episodes: int = 20_000
    batch_size: int = 8
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_period: int = 1_000
    val_episodes: int = 200
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.episodes < 1 or self.batch_size < 1:
            raise ConfigurationError("episodes and batch_size must be positive")
        if self.episodes % self.batch_size != 0:
            raise ConfigurationError(
                f"episodes ({self.episodes}) must be divisible by "
                f"batch_size ({self.batch_size})")
        if self.val_period % self.batch_size != 0:
            raise ConfigurationError(
                f"val_period ({self.val_period}) must be divisible by "
                f"batch_size ({self.batch_size})")
        if self.val_episodes < 2:
            raise ConfigurationError("val_episodes must be >= 2")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")


# Named presets; "full" mirrors a large-scale schedule (110k tasks, 16 per
# batch, lr 5e-4, validate every 10k), "desk" is the tractable default.
PRESETS = {
    "desk": dict(episodes=20_000, batch_size=8, learning_rate=5e-4,
                 val_period=1_000, val_episodes=200),
    "full": dict(episodes=110_000, batch_size=16, learning_rate=5e-4,
                 val_period=10_000, val_episodes=600),
}


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    """Best-on-validation snapshot plus the full training log."""

    best_params: dict[str, np.ndarray]
    best_val_accuracy: float
    best_episode: int
    log_rows: list[tuple[int, float, float | None]] = field(repr=False)

    def log_csv(self) -> str:
        lines = ["episode,loss,val_accuracy"]
        for episode, loss, val in self.log_rows:
            val_str = "" if val is None else repr(val)
            lines.append(f"{episode},{repr(loss)},{val_str}")
        return "\n".join(lines) + "\n"


def _episode_pass(model: FewShotClassifier, episode: Episode):
    """Forward+backward for one episode; returns (loss, n_queries, grads).

    Gradients are extracted without touching the shared ``grad`` buffers,
    so concurrent episode passes over one parameter set cannot interfere.
    """
    params = model.named_parameters()
    names = list(params)
    with Tape() as tape:
        loss, n_q = model.episode_loss(episode)
        grad_list = tape.gradients(loss, [params[n] for n in names])
    return float(loss.data), n_q, dict(zip(names, grad_list))


def _batch_pass(model: FewShotClassifier, episodes: list[Episode], workers: int):
    """Per-episode passes reduced in episode order.

    Thread workers share read-only parameters; each runs its own tape. The
    ordered reduction makes the result independent of completion order.
    """
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda ep: _episode_pass(model, ep), episodes))
    else:
        results = [_episode_pass(model, ep) for ep in episodes]
    total_q = sum(r[1] for r in results)
    loss_sum = sum(r[0] for r in results)
    grads = {k: np.zeros_like(v) for k, v in results[0][2].items()}
    for _, _, g in results:
        for k in grads:
            grads[k] += g[k]
    inv = 1.0 / total_q
    for k in grads:
        grads[k] *= inv
    return loss_sum * inv, grads


def validation_accuracy(model: FewShotClassifier, dataset: LabeledDataset,
                        classes, protocol: EpisodeProtocol, count: int,
                        master_seed: int, workers: int = 1) -> float:
    """Mean episode accuracy over a fixed, seed-derived validation stream."""
    def one(index: int) -> float:
        episode = stream_episode(dataset, classes, protocol, master_seed, index)
        probs = model.predict(episode)
        predicted = probs.argmax(axis=1)
        return float((predicted == episode.query_y).mean())

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(one, range(count)))
    else:
        accs = [one(i) for i in range(count)]
    return float(np.mean(accs))


def stream_seed(master_seed: int, label: str) -> int:
    """Stable derived seed for a named stream (train/val/test/...)."""
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def train(model: FewShotClassifier, dataset: LabeledDataset, classes,
          protocol: EpisodeProtocol, config: TrainConfig,
          val_dataset: LabeledDataset | None = None,
          val_classes=None) -> TrainResult:
    """Run the episodic loop; returns the best-on-validation snapshot.

    ``classes`` restricts training episodes to a class subset (pass
    ``dataset.class_labels`` to use the whole pool). Validation defaults to
    the same pool/classes unless an explicit validation source is given.
    """
    config.validate()
    val_dataset = val_dataset or dataset
    val_classes = val_classes if val_classes is not None else classes
    params = model.named_parameters()
    state = AdamState(params)
    train_seed = stream_seed(config.seed, "train")
    val_seed = stream_seed(config.seed, "val")

    log_rows: list[tuple[int, float, float | None]] = []
    best_params = model.snapshot()
    best_val = -1.0
    best_episode = 0

    n_batches = config.episodes // config.batch_size
    for batch_index in range(n_batches):
        start = batch_index * config.batch_size
        episodes = [stream_episode(dataset, classes, protocol, train_seed, start + i)
                    for i in range(config.batch_size)]
        try:
            loss, grads = _batch_pass(model, episodes, config.workers)
        except FloatingPointError as exc:
            raise TrainingDivergedError(
                str(exc), [ep.seed for ep in episodes],
                model.head_cfg.variant, model.last_condition_numbers()) from exc
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite batch loss {loss}", [ep.seed for ep in episodes],
                model.head_cfg.variant, model.last_condition_numbers())
        adam_step(params, grads, state, config.learning_rate,
                  config.beta1, config.beta2, config.eps)

        consumed = start + config.batch_size
        val_value: float | None = None
        if consumed % config.val_period == 0 or consumed == config.episodes:
            val_value = validation_accuracy(
                model, val_dataset, val_classes, protocol,
                config.val_episodes, val_seed, config.workers)
            if val_value > best_val:
                best_val = val_value
                best_params = model.snapshot()
                best_episode = consumed
        log_rows.append((consumed, loss, val_value))

    return TrainResult(best_params=best_params, best_val_accuracy=best_val,
                       best_episode=best_episode, log_rows=log_rows)
