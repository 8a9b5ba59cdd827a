"""Episode sampling: turn a class pool into a stream of few-shot tasks.

Two protocols are supported. ``variable`` draws the way uniformly from a
range and an independent per-class shot count from another range (support
imbalance allowed); ``fixed`` is the classic N-way K-shot setting. Query
sets are always class-balanced so per-episode accuracy is comparable
across ways.

Streams are pure functions of (master_seed, index): episode i is derived
from its own seed sequence, so consumers may materialize any subrange in
any order, on any worker, and see identical tasks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .datasets import ConfigurationError, LabeledDataset


class SamplingError(RuntimeError):
    """The requested episode cannot be drawn from the available pool."""


@dataclass(eq=False)
class Episode:
    """One few-shot task: a support set and a class-balanced query set.

    Labels in ``support_y``/``query_y`` are local indices 0..way-1;
    ``class_labels[j]`` maps local index j back to the dataset label.
    ``support_idx``/``query_idx`` are the originating dataset row indices
    (disjoint by construction).
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_labels: tuple[int, ...]
    shots: tuple[int, ...]
    support_idx: np.ndarray
    query_idx: np.ndarray
    seed: int

    @property
    def way(self) -> int:
        return len(self.class_labels)

    @property
    def n_queries(self) -> int:
        return self.query_x.shape[0]


@dataclass
class EpisodeProtocol:
    """Episode-shape parameters for either sampling mode."""

    mode: str = "variable"          # "variable" | "fixed"
    way_min: int = 2
    way_max: int = 10
    shot_min: int = 1
    shot_max: int = 20
    ways: int = 5                   # fixed mode
    shots: int = 5                  # fixed mode
    queries: int = 10               # per class, both modes

    def validate(self) -> None:
        if self.mode not in ("variable", "fixed"):
            raise ConfigurationError(f"unknown protocol mode {self.mode!r}")
        if self.queries < 1:
            raise ConfigurationError(f"queries must be >= 1, got {self.queries}")
        if self.mode == "variable":
            if self.way_min < 2:
                raise ConfigurationError(f"way_min must be >= 2, got {self.way_min}")
            if self.way_max < self.way_min:
                raise ConfigurationError(
                    f"way range [{self.way_min}, {self.way_max}] is empty")
            if self.shot_min < 1:
                raise ConfigurationError(f"shot_min must be >= 1, got {self.shot_min}")
            if self.shot_max < self.shot_min:
                raise ConfigurationError(
                    f"shot range [{self.shot_min}, {self.shot_max}] is empty")
        else:
            if self.ways < 2:
                raise ConfigurationError(f"ways must be >= 2, got {self.ways}")
            if self.shots < 1:
                raise ConfigurationError(f"shots must be >= 1, got {self.shots}")


def sample_episode(dataset: LabeledDataset, classes: Sequence[int],
                   protocol: EpisodeProtocol, rng: np.random.Generator,
                   seed: int = 0) -> Episode:
    """Draw one episode from the given class subset of the pool.

    Classes are sampled without replacement; support and query examples are
    then drawn without replacement within each class. In variable mode a
    class whose pool cannot cover its drawn shot count plus the query quota
    has its shots clamped down (never resampled), keeping the episode
    distribution simple.
    """
    protocol.validate()
    classes = list(classes)
    q = protocol.queries

    if protocol.mode == "fixed":
        way = protocol.ways
        if len(classes) < way:
            raise SamplingError(
                f"need {way} classes but the split part has {len(classes)}")
    else:
        if len(classes) < protocol.way_min:
            raise SamplingError(
                f"need at least {protocol.way_min} classes but the split part "
                f"has {len(classes)}")
        hi = min(protocol.way_max, len(classes))
        way = int(rng.integers(protocol.way_min, hi + 1))

    chosen = rng.choice(np.asarray(classes, dtype=np.int64), size=way, replace=False)

    sup_parts, qry_parts = [], []
    sup_idx_parts, qry_idx_parts = [], []
    shots: list[int] = []
    for local, label in enumerate(int(c) for c in chosen):
        pool = dataset.by_class[label]
        if protocol.mode == "fixed":
            s = protocol.shots
            if len(pool) < s + q:
                raise SamplingError(
                    f"class {label} has {len(pool)} examples, needs {s + q}")
        else:
            s = int(rng.integers(protocol.shot_min, protocol.shot_max + 1))
            if len(pool) < protocol.shot_min + q:
                raise SamplingError(
                    f"class {label} has {len(pool)} examples, needs at least "
                    f"{protocol.shot_min + q}")
            s = min(s, len(pool) - q)
        picked = rng.choice(pool, size=s + q, replace=False)
        sup_idx_parts.append(picked[:s])
        qry_idx_parts.append(picked[s:])
        sup_parts.append(np.full(s, local, dtype=np.int64))
        qry_parts.append(np.full(q, local, dtype=np.int64))
        shots.append(s)

    support_idx = np.concatenate(sup_idx_parts)
    query_idx = np.concatenate(qry_idx_parts)
    return Episode(
        support_x=dataset.examples[support_idx],
        support_y=np.concatenate(sup_parts),
        query_x=dataset.examples[query_idx],
        query_y=np.concatenate(qry_parts),
        class_labels=tuple(int(c) for c in chosen),
        shots=tuple(shots),
        support_idx=support_idx,
        query_idx=query_idx,
        seed=seed,
    )


def episode_seed(master_seed: int, index: int) -> int:
    """Derived per-episode seed, a pure function of (master_seed, index)."""
    ss = np.random.SeedSequence((int(master_seed), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def episode_stream(dataset: LabeledDataset, classes: Sequence[int],
                   protocol: EpisodeProtocol, count: int,
                   master_seed: int) -> Iterator[Episode]:
    """Deterministic, order-independent stream of ``count`` episodes."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    for i in range(count):
        yield stream_episode(dataset, classes, protocol, master_seed, i)


def stream_episode(dataset: LabeledDataset, classes: Sequence[int],
                   protocol: EpisodeProtocol, master_seed: int,
                   index: int) -> Episode:
    """Materialize episode ``index`` of the stream (random access)."""
    ss = np.random.SeedSequence((int(master_seed), int(index)))
    rng = np.random.default_rng(ss)
    return sample_episode(dataset, classes, protocol, rng,
                          seed=episode_seed(master_seed, index))


def mixed_episode_stream(datasets: Sequence[tuple[str, LabeledDataset]],
                         protocol: EpisodeProtocol, count: int,
                         master_seed: int) -> Iterator[tuple[str, Episode]]:
    """Stream over several pools; each episode draws all classes from one
    pool chosen uniformly by the episode's own seed."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    named = list(datasets)
    for i in range(count):
        ss = np.random.SeedSequence((int(master_seed), int(i)))
        rng = np.random.default_rng(ss)
        pick = int(rng.integers(0, len(named)))
        name, ds = named[pick]
        yield name, sample_episode(ds, ds.class_labels, protocol, rng,
                                   seed=episode_seed(master_seed, i))


def validate_episode(episode: Episode, protocol: EpisodeProtocol | None = None) -> None:
    """Assert the episode invariants; raises AssertionError on violation."""
    way = episode.way
    assert way >= 2, "episode must have at least two classes"
    assert len(episode.shots) == way
    assert set(np.unique(episode.support_y)) == set(range(way)), \
        "every support class needs at least one example"
    assert set(np.unique(episode.query_y)) <= set(range(way)), \
        "query labels must be a subset of support labels"
    assert set(np.unique(episode.query_y)) == set(range(way)), \
        "every support class needs at least one query example"
    overlap = np.intersect1d(episode.support_idx, episode.query_idx)
    assert overlap.size == 0, "support and query share dataset indices"
    assert len(np.unique(episode.support_idx)) == len(episode.support_idx)
    assert len(np.unique(episode.query_idx)) == len(episode.query_idx)
    realized = [int((episode.support_y == j).sum()) for j in range(way)]
    assert tuple(realized) == episode.shots, \
        "recorded shot counts must equal realized support counts"
    if protocol is not None and protocol.mode == "fixed":
        assert way == protocol.ways
        assert all(s == protocol.shots for s in episode.shots)
