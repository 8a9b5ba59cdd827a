"""Deterministic matplotlib rendering of the parsed CSVs.

Rendering is pinned for byte-stable output: Agg backend, fixed dpi and
figure size, and no Software/date metadata in the PNG, so rerunning on
identical input produces an identical byte stream.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .io import AblationTable, CurveFile, TrainingLog, group_position

_DPI = 120
_FIGSIZE = (6.0, 4.0)
_PNG_METADATA = {"Software": None}  # drop the version string for stable bytes


def _new_axes():
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, out_path) -> None:
    fig.savefig(out_path, format="png", dpi=_DPI, metadata=_PNG_METADATA)
    plt.close(fig)


def render_curve(curves: list[CurveFile], kind: str, out_path) -> None:
    """Accuracy-vs-shots (log x) or accuracy-vs-ways lines with CI bands."""
    _save(curve_figure(curves, kind), out_path)


def curve_figure(curves: list[CurveFile], kind: str):
    if kind not in ("shots", "ways"):
        raise ValueError(f"kind must be 'shots' or 'ways', got {kind!r}")
    if not curves:
        raise ValueError("no curves to render")
    fig, ax = _new_axes()
    for curve in curves:
        xs = [group_position(g) for g in curve.groups]
        order = sorted(range(len(xs)), key=lambda i: xs[i])
        xs = [xs[i] for i in order]
        means = [curve.means[i] for i in order]
        halfwidths = [curve.halfwidths[i] for i in order]
        lo = [m - h for m, h in zip(means, halfwidths)]
        hi = [m + h for m, h in zip(means, halfwidths)]
        if len(xs) == 1:
            ax.errorbar(xs, means, yerr=halfwidths, fmt="o", capsize=4,
                        label=curve.label)
        else:
            ax.plot(xs, means, marker="o", label=curve.label)
            ax.fill_between(xs, lo, hi, alpha=0.25, linewidth=0)
    if kind == "shots":
        ax.set_xscale("log")
        ax.set_xlabel("support examples per class (log scale)")
    else:
        ax.set_xlabel("classes in task (ways)")
    ax.set_ylabel("accuracy (%)")
    ax.legend(loc="lower right")
    return fig


def render_ablation(table: AblationTable, out_path) -> None:
    """Grouped bars (variant within family) with CI error bars."""
    fig, ax = _new_axes()
    n_var = len(table.variants)
    width = 0.8 / n_var
    for vi, variant in enumerate(table.variants):
        xs, heights, errs = [], [], []
        for fi, family in enumerate(table.families):
            key = (variant, family)
            if key not in table.accuracy:
                continue
            xs.append(fi + (vi - (n_var - 1) / 2) * width)
            heights.append(table.accuracy[key])
            errs.append(table.halfwidth[key])
        ax.bar(xs, heights, width=width, yerr=errs, capsize=3, label=variant)
    ax.set_xticks(range(len(table.families)))
    ax.set_xticklabels(table.families)
    ax.set_ylabel("accuracy (%)")
    ax.legend(loc="lower right")
    _save(fig, out_path)


def render_training(log: TrainingLog, out_path) -> None:
    """Batch-loss curve with validation accuracy on a twin axis."""
    fig, ax = _new_axes()
    ax.plot(log.episodes, log.losses, label="batch loss", color="tab:blue")
    ax.set_xlabel("episodes")
    ax.set_ylabel("loss")
    if log.val_episodes:
        twin = ax.twinx()
        twin.plot(log.val_episodes, log.val_accuracies, marker="o",
                  color="tab:orange", label="validation accuracy")
        twin.set_ylabel("validation accuracy (%)")
    _save(fig, out_path)
