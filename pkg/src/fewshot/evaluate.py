"""Test-time evaluation, confidence intervals, curves, and ablation tables.

Accuracy is reported as mean +/- a 95% normal-approximation confidence
interval over per-task accuracies (halfwidth 1.96 * stddev / sqrt(n), sample
stddev with one delta degree of freedom). Results serialize as one JSON
record per line; curve and table outputs are plain CSV so the plotting
package (or anything else) can consume them without importing this code.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .episodes import Episode
from .model import FewShotClassifier

# Geometric shot buckets used for trend checks; raw shot counts are the
# default grouping.
SHOT_BUCKETS = ((1, 2), (3, 4), (5, 8), (9, 16), (17, None))


class EvaluationError(RuntimeError):
    pass


@dataclass(eq=False)
class EpisodeResult:
    """Everything reporting needs from one evaluated episode."""

    seed: int
    way: int
    shots: tuple[int, ...]
    true_labels: list[int]
    predicted: list[int]
    probabilities: list[list[float]]
    accuracy: float

    @classmethod
    def from_prediction(cls, episode: Episode, probs: np.ndarray) -> "EpisodeResult":
        predicted = probs.argmax(axis=1)
        accuracy = float((predicted == episode.query_y).mean())
        return cls(seed=int(episode.seed), way=episode.way,
                   shots=tuple(int(s) for s in episode.shots),
                   true_labels=[int(y) for y in episode.query_y],
                   predicted=[int(p) for p in predicted],
                   probabilities=[[float(v) for v in row] for row in probs],
                   accuracy=accuracy)

    def to_json(self) -> str:
        # Field order is fixed and documented: seed, way, shots, true_labels,
        # predicted, probabilities, accuracy.
        record = {"seed": self.seed, "way": self.way, "shots": list(self.shots),
                  "true_labels": self.true_labels, "predicted": self.predicted,
                  "probabilities": self.probabilities, "accuracy": self.accuracy}
        return json.dumps(record, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "EpisodeResult":
        rec = json.loads(line)
        return cls(seed=rec["seed"], way=rec["way"], shots=tuple(rec["shots"]),
                   true_labels=rec["true_labels"], predicted=rec["predicted"],
                   probabilities=rec["probabilities"], accuracy=rec["accuracy"])


@dataclass(eq=False)
class EvalSummary:
    """Mean accuracy with CI over tasks, plus per-episode results."""

    mean_accuracy: float
    ci_halfwidth: float
    n_tasks: int
    results: list[EpisodeResult] = field(repr=False)
    stream_digest: str = ""


def mean_ci(values) -> tuple[float, float]:
    """Mean and 95% CI halfwidth (1.96 * sample stddev / sqrt(n))."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise EvaluationError("confidence interval needs at least two tasks")
    mean = float(arr.mean())
    std = float(arr.std(ddof=1))
    return mean, float(1.96 * std / np.sqrt(arr.size))


def stream_digest(seeds) -> str:
    h = hashlib.sha256()
    for s in seeds:
        h.update(int(s).to_bytes(8, "little"))
    return h.hexdigest()


def evaluate(model: FewShotClassifier, episodes, workers: int = 1) -> EvalSummary:
    """Run the model over an episode stream and aggregate accuracy."""
    episodes = list(episodes)
    if len(episodes) < 2:
        raise EvaluationError(f"evaluation needs >= 2 episodes, got {len(episodes)}")

    def one(episode: Episode) -> EpisodeResult:
        return EpisodeResult.from_prediction(episode, model.predict(episode))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, episodes))
    else:
        results = [one(ep) for ep in episodes]
    mean, ci = mean_ci([r.accuracy for r in results])
    return EvalSummary(mean_accuracy=mean, ci_halfwidth=ci, n_tasks=len(results),
                       results=results,
                       stream_digest=stream_digest(r.seed for r in results))


def write_results(path, results) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")


def read_results(path) -> list[EpisodeResult]:
    with open(path) as fh:
        return [EpisodeResult.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Curves


@dataclass
class CurvePoint:
    """One grouped accuracy point: key, mean, group size, CI halfwidth."""

    group: str
    mean_accuracy: float
    count: int
    ci_halfwidth: float


def _grouped_points(groups: dict) -> list[CurvePoint]:
    points = []
    for key in sorted(groups, key=lambda k: groups[k]["order"]):
        vals = np.asarray(groups[key]["values"])
        mean = float(vals.mean())
        ci = 0.0
        if vals.size >= 2:
            ci = float(1.96 * vals.std(ddof=1) / np.sqrt(vals.size))
        points.append(CurvePoint(group=str(key), mean_accuracy=mean,
                                 count=int(vals.size), ci_halfwidth=ci))
    return points


def _bucket_label(shot: int, buckets) -> tuple[str, int]:
    for order, (lo, hi) in enumerate(buckets):
        if shot >= lo and (hi is None or shot <= hi):
            label = f"{lo}+" if hi is None else (f"{lo}" if lo == hi else f"{lo}-{hi}")
            return label, order
    raise EvaluationError(f"shot count {shot} not covered by buckets {buckets}")


def accuracy_by_shots(results, buckets=None) -> list[CurvePoint]:
    """Per-class accuracies grouped by that class's shot count.

    For every episode and class, the accuracy over that class's queries is
    one observation; observations are grouped by the class's shot count
    (raw counts by default, or by the given (lo, hi) buckets).
    """
    if not results:
        raise EvaluationError("no results to group")
    groups: dict = {}
    for r in results:
        true = np.asarray(r.true_labels)
        pred = np.asarray(r.predicted)
        for k, shot in enumerate(r.shots):
            mask = true == k
            if not mask.any():
                continue
            acc = float((pred[mask] == k).mean())
            if buckets is None:
                key, order = str(shot), shot
            else:
                key, order = _bucket_label(shot, buckets)
            entry = groups.setdefault(key, {"values": [], "order": order})
            entry["values"].append(acc)
    return _grouped_points(groups)


def accuracy_by_ways(results) -> list[CurvePoint]:
    """Whole-episode accuracies grouped by way count."""
    if not results:
        raise EvaluationError("no results to group")
    groups: dict = {}
    for r in results:
        entry = groups.setdefault(str(r.way), {"values": [], "order": r.way})
        entry["values"].append(r.accuracy)
    return _grouped_points(groups)


def write_curve_csv(path, points) -> None:
    with open(path, "w") as fh:
        fh.write("group,mean_accuracy,count,ci_halfwidth\n")
        for p in points:
            fh.write(f"{p.group},{repr(p.mean_accuracy)},{p.count},"
                     f"{repr(p.ci_halfwidth)}\n")


# ---------------------------------------------------------------------------
# Ablation tables


def ablation_table(results_by_variant: dict[str, dict[str, EvalSummary]]) -> list[dict]:
    """Rows of variant x family accuracies from paired evaluations.

    Every variant must have been evaluated on bit-identical episode streams
    per family (checked through the stream digests); mismatch is an error,
    not a warning, because unpaired comparisons silently inflate variance.
    """
    families: dict[str, str] = {}
    rows = []
    for variant, by_family in results_by_variant.items():
        for family, summary in by_family.items():
            digest = families.setdefault(family, summary.stream_digest)
            if summary.stream_digest != digest:
                raise EvaluationError(
                    f"variant {variant!r} saw a different episode stream for "
                    f"family {family!r}; ablation requires paired episodes")
            rows.append({"variant": variant, "family": family,
                         "accuracy": summary.mean_accuracy,
                         "ci_halfwidth": summary.ci_halfwidth})
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("variant,family,accuracy,ci_halfwidth\n")
        for row in rows:
            fh.write(f"{row['variant']},{row['family']},"
                     f"{repr(row['accuracy'])},{repr(row['ci_halfwidth'])}\n")


def count_trainable_params(model: FewShotClassifier) -> dict[str, int]:
    """Exact per-component and total trainable parameter counts."""
    return model.component_param_counts()
