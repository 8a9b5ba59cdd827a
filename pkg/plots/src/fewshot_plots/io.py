"""Parsers for the evaluator's delimited outputs.

These are read-only consumers of three documented CSV shapes:

    curves:    group,mean_accuracy,count,ci_halfwidth
    ablation:  variant,family,accuracy,ci_halfwidth
    training:  episode,loss,val_accuracy   (val_accuracy blank between
               validation events)

Accuracies arrive either as fractions in [0, 1] or as percentages in
[0, 100]; files whose values all sit in [0, 1] are treated as fractions and
normalized to percent. No other numeric reinterpretation happens here.
"""

from __future__ import annotations

from dataclasses import dataclass


class PlotDataError(ValueError):
    """A CSV row does not match the documented shape; names the line."""


def _parse_float(raw: str, path, line_no: int, column: str) -> float:
    try:
        return float(raw)
    except ValueError as exc:
        raise PlotDataError(
            f"{path}:{line_no}: column {column!r} is not a number: {raw!r}"
        ) from exc


@dataclass
class CurveFile:
    """Parsed accuracy curve: group keys with means and CI halfwidths."""

    label: str
    groups: list[str]
    means: list[float]        # percent after normalization
    counts: list[int]
    halfwidths: list[float]   # percent after normalization


def group_position(group: str) -> float:
    """Numeric plotting position for a group key.

    Raw keys are integers; bucket keys look like "3-4" (midpoint) or
    "17+" (lower edge).
    """
    text = group.strip()
    if text.endswith("+"):
        return float(text[:-1])
    if "-" in text[1:]:
        lo, hi = text.split("-", 1)
        return 0.5 * (float(lo) + float(hi))
    return float(text)


def read_curve(path, label: str | None = None) -> CurveFile:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0].split(",") != ["group", "mean_accuracy", "count",
                                            "ci_halfwidth"]:
        raise PlotDataError(f"{path}:1: expected header "
                            f"'group,mean_accuracy,count,ci_halfwidth'")
    groups, means, counts, halfwidths = [], [], [], []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise PlotDataError(
                f"{path}:{line_no}: expected 4 columns, got {len(parts)}")
        groups.append(parts[0])
        means.append(_parse_float(parts[1], path, line_no, "mean_accuracy"))
        counts.append(int(_parse_float(parts[2], path, line_no, "count")))
        halfwidths.append(_parse_float(parts[3], path, line_no, "ci_halfwidth"))
        group_position(parts[0])  # validates the group key shape
    if not groups:
        raise PlotDataError(f"{path}:2: no data rows")
    if max(means) <= 1.0:  # fractions; normalize to percent
        means = [m * 100.0 for m in means]
        halfwidths = [h * 100.0 for h in halfwidths]
    if not all(0.0 <= m <= 100.0 for m in means):
        raise PlotDataError(f"{path}: mean_accuracy outside [0, 100]")
    import os
    name = label or os.path.splitext(os.path.basename(str(path)))[0]
    return CurveFile(label=name, groups=groups, means=means, counts=counts,
                     halfwidths=halfwidths)


@dataclass
class AblationTable:
    """Rows of variant x family accuracies (percent) with CI halfwidths."""

    variants: list[str]
    families: list[str]
    accuracy: dict[tuple[str, str], float]
    halfwidth: dict[tuple[str, str], float]


def read_ablation(path) -> AblationTable:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0].split(",") != ["variant", "family", "accuracy",
                                            "ci_halfwidth"]:
        raise PlotDataError(f"{path}:1: expected header "
                            f"'variant,family,accuracy,ci_halfwidth'")
    variants, families = [], []
    accuracy, halfwidth = {}, {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise PlotDataError(
                f"{path}:{line_no}: expected 4 columns, got {len(parts)}")
        variant, family = parts[0], parts[1]
        if variant not in variants:
            variants.append(variant)
        if family not in families:
            families.append(family)
        accuracy[(variant, family)] = _parse_float(parts[2], path, line_no,
                                                   "accuracy")
        halfwidth[(variant, family)] = _parse_float(parts[3], path, line_no,
                                                    "ci_halfwidth")
    if not accuracy:
        raise PlotDataError(f"{path}:2: no data rows")
    if max(accuracy.values()) <= 1.0:
        accuracy = {k: v * 100.0 for k, v in accuracy.items()}
        halfwidth = {k: v * 100.0 for k, v in halfwidth.items()}
    return AblationTable(variants=variants, families=families,
                         accuracy=accuracy, halfwidth=halfwidth)


@dataclass
class TrainingLog:
    """Per-batch losses plus sparse validation accuracies (percent)."""

    episodes: list[int]
    losses: list[float]
    val_episodes: list[int]
    val_accuracies: list[float]


def read_training_log(path) -> TrainingLog:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0].split(",") != ["episode", "loss", "val_accuracy"]:
        raise PlotDataError(
            f"{path}:1: expected header 'episode,loss,val_accuracy'")
    episodes, losses, val_eps, val_accs = [], [], [], []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise PlotDataError(
                f"{path}:{line_no}: expected 3 columns, got {len(parts)}")
        episode = int(_parse_float(parts[0], path, line_no, "episode"))
        episodes.append(episode)
        losses.append(_parse_float(parts[1], path, line_no, "loss"))
        if parts[2].strip():
            val_eps.append(episode)
            val_accs.append(_parse_float(parts[2], path, line_no,
                                         "val_accuracy"))
    if not episodes:
        raise PlotDataError(f"{path}:2: no data rows")
    if val_accs and max(val_accs) <= 1.0:
        val_accs = [v * 100.0 for v in val_accs]
    return TrainingLog(episodes=episodes, losses=losses,
                       val_episodes=val_eps, val_accuracies=val_accs)
