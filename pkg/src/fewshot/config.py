"""Flat ``key = value`` run configuration with sections, plus resolution.

A run is fully described by one INI-style file; command-line flags override
file values. Every command writes the fully resolved configuration into its
output directory so any result can be reproduced from that copy alone.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .datasets import (ClassSplit, ConfigurationError, LabeledDataset,
                       SyntheticSpec, generate_synthetic, load_idx,
                       mixture_from_spec, split_classes)
from .episodes import EpisodeProtocol
from .model import HeadConfig, parse_head_spec
from .train import PRESETS, TrainConfig, stream_seed


@dataclass
class DataConfig:
    """Where labeled examples come from and how classes are split."""

    source: str = "synthetic"        # synthetic | idx
    name: str = "synthetic"
    dim: int = 16
    classes: int = 5
    per_class: int = 200
    mean_range: float = 3.0
    condition_number: float = 1.0
    scale: float = 1.0
    seed: int | None = None          # defaults to the run seed
    sample_seed: int | None = None   # defaults to data seed
    families: int = 1
    images: str = ""
    labels: str = ""
    split: str = "none"              # none | classes
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    split_seed: int | None = None    # defaults to the run seed


@dataclass
class RunConfig:
    out: str = "run-out"
    seed: int = 0
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    protocol: EpisodeProtocol = field(default_factory=EpisodeProtocol)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_episodes: int = 600

    def resolved(self) -> "RunConfig":
        """Copy with every deferred default filled in."""
        cfg = copy_config(self)
        if cfg.data.seed is None:
            cfg.data.seed = cfg.seed
        if cfg.data.sample_seed is None:
            cfg.data.sample_seed = cfg.data.seed
        if cfg.data.split_seed is None:
            cfg.data.split_seed = cfg.seed
        cfg.train.seed = cfg.seed
        cfg.train.workers = cfg.workers
        cfg.backbone.input_dim = cfg.data.dim if cfg.data.source == "synthetic" \
            else cfg.backbone.input_dim
        return cfg


def copy_config(cfg: RunConfig) -> RunConfig:
    return RunConfig(
        out=cfg.out, seed=cfg.seed, workers=cfg.workers,
        data=dataclasses.replace(cfg.data),
        protocol=dataclasses.replace(cfg.protocol),
        backbone=dataclasses.replace(cfg.backbone),
        head=dataclasses.replace(cfg.head),
        train=dataclasses.replace(cfg.train),
        eval_episodes=cfg.eval_episodes,
    )


_SECTION_FIELDS = {
    "run": ("out", "seed", "workers", "eval_episodes"),
    "data": tuple(f.name for f in dataclasses.fields(DataConfig)),
    "protocol": tuple(f.name for f in dataclasses.fields(EpisodeProtocol)),
    "backbone": tuple(f.name for f in dataclasses.fields(BackboneConfig)),
    "head": ("variant", "beta", "projection", "proj_hidden", "proj_dim",
             "pooled_task_cov"),
    "train": ("preset", "episodes", "batch_size", "learning_rate", "beta1",
              "beta2", "eps", "val_period", "val_episodes"),
}


def _coerce(current, raw: str, where: str):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{where}: expected an integer, got {raw!r}") from exc
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{where}: expected a number, got {raw!r}") from exc
    return raw.strip()


def load_config(path: str | None = None, text: str | None = None) -> RunConfig:
    """Parse a configuration file into a RunConfig (defaults filled)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path) as fh:
                parser.read_file(fh)
    except (configparser.Error, OSError) as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from exc

    cfg = RunConfig()
    targets = {"run": cfg, "data": cfg.data, "protocol": cfg.protocol,
               "backbone": cfg.backbone, "head": cfg.head, "train": cfg.train}
    for section in parser.sections():
        if section not in targets:
            raise ConfigurationError(f"unknown config section [{section}]")
        target = targets[section]
        if section == "train" and parser.has_option("train", "preset"):
            preset = parser.get("train", "preset").strip()
            if preset not in PRESETS:
                raise ConfigurationError(
                    f"train.preset: unknown preset {preset!r}; "
                    f"choose from {sorted(PRESETS)}")
            for key, value in PRESETS[preset].items():
                setattr(cfg.train, key, value)
        for key, raw in parser.items(section):
            if key == "preset" and section == "train":
                continue
            where = f"{section}.{key}"
            if section == "run":
                if key == "eval_episodes":
                    cfg.eval_episodes = _coerce(cfg.eval_episodes, raw, where)
                elif key in ("out", "seed", "workers"):
                    setattr(cfg, key, _coerce(getattr(cfg, key), raw, where))
                else:
                    raise ConfigurationError(f"unknown config key {where}")
                continue
            if key not in _SECTION_FIELDS[section]:
                raise ConfigurationError(f"unknown config key {where}")
            current = getattr(target, key)
            if current is None:  # optional int seeds
                try:
                    setattr(target, key, int(raw))
                except ValueError as exc:
                    raise ConfigurationError(
                        f"{where}: expected an integer, got {raw!r}") from exc
            else:
                setattr(target, key, _coerce(current, raw, where))
    return cfg


def apply_overrides(cfg: RunConfig, *, out=None, seed=None, workers=None,
                    head=None, beta=None, no_adapt=False,
                    autoregressive=False) -> RunConfig:
    """Apply command-line flag overrides on top of file values."""
    if out is not None:
        cfg.out = out
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    if head is not None:
        variant, projection = parse_head_spec(head)
        cfg.head.variant = variant
        cfg.head.projection = projection
    if beta is not None:
        cfg.head.beta = beta
    if no_adapt:
        cfg.backbone.adapt = False
    if autoregressive:
        cfg.backbone.autoregressive = True
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Deterministic INI rendering of a resolved configuration."""
    out = io.StringIO()
    sources = {"run": cfg, "data": cfg.data, "protocol": cfg.protocol,
               "backbone": cfg.backbone, "head": cfg.head, "train": cfg.train}
    for section in ("run", "data", "protocol", "backbone", "head", "train"):
        out.write(f"[{section}]\n")
        for key in _SECTION_FIELDS[section]:
            if section == "run":
                value = cfg.eval_episodes if key == "eval_episodes" else getattr(cfg, key)
            elif section == "train" and key == "preset":
                continue
            else:
                value = getattr(sources[section], key)
            if value is None:
                continue
            out.write(f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()


def config_fingerprint(cfg: RunConfig) -> str:
    """Hash of the experiment-defining fields.

    The output directory and worker count are execution details, not part
    of the experiment identity: runs that differ only there must produce
    identical results (and identical checkpoints).
    """
    semantic = copy_config(cfg)
    semantic.out = ""
    semantic.workers = 1
    semantic.train.workers = 1
    return hashlib.sha256(config_text(semantic).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Data materialization


def family_specs(cfg: RunConfig) -> list[tuple[str, SyntheticSpec]]:
    """Named synthetic family specs for this run (one unless data.families > 1)."""
    if cfg.data.source != "synthetic":
        raise ConfigurationError("synthetic family specs need data.source = synthetic")
    base_seed = cfg.data.seed
    sample_seed = cfg.data.sample_seed
    if cfg.data.families == 1:
        spec = SyntheticSpec(dim=cfg.data.dim, classes=cfg.data.classes,
                             per_class=cfg.data.per_class,
                             mean_range=cfg.data.mean_range,
                             condition_number=cfg.data.condition_number,
                             scale=cfg.data.scale, seed=base_seed,
                             sample_seed=sample_seed)
        return [(cfg.data.name, spec)]
    specs = []
    for i in range(cfg.data.families):
        seed_i = stream_seed(base_seed, f"family{i}")
        spec = SyntheticSpec(dim=cfg.data.dim, classes=cfg.data.classes,
                             per_class=cfg.data.per_class,
                             mean_range=cfg.data.mean_range,
                             condition_number=cfg.data.condition_number,
                             scale=cfg.data.scale, seed=seed_i,
                             sample_seed=stream_seed(sample_seed, f"family{i}"))
        specs.append((f"{cfg.data.name}{i}", spec))
    return specs


def _load_pool(cfg: RunConfig, spec: SyntheticSpec | None,
               fresh_tag: str | None) -> LabeledDataset:
    if cfg.data.source == "synthetic":
        assert spec is not None
        if fresh_tag is not None:
            spec = dataclasses.replace(
                spec, sample_seed=stream_seed(spec.sample_seed, fresh_tag))
        return generate_synthetic(spec)[0]
    if cfg.data.source == "idx":
        if not cfg.data.images or not cfg.data.labels:
            raise ConfigurationError(
                "data.images and data.labels are required for source = idx")
        return load_idx(cfg.data.images, cfg.data.labels)
    raise ConfigurationError(f"unknown data.source {cfg.data.source!r}")


def dataset_for_phase(cfg: RunConfig, phase: str,
                      family_index: int = 0) -> tuple[LabeledDataset, tuple[int, ...]]:
    """Materialize the example pool and class subset for train/val/test.

    With class splits, one pool is shared and phases see disjoint classes.
    Without splits, train/val share a pool while the test phase of a
    synthetic family draws a fresh pool from the same mixture, so measured
    test accuracy is comparable against the family's Bayes ceiling.
    """
    if phase not in ("train", "val", "test"):
        raise ConfigurationError(f"unknown phase {phase!r}")
    spec = None
    if cfg.data.source == "synthetic":
        spec = family_specs(cfg)[family_index][1]

    if cfg.data.split == "classes":
        pool = _load_pool(cfg, spec, fresh_tag=None)
        split = split_classes(pool, (cfg.data.train_fraction,
                                     cfg.data.val_fraction,
                                     cfg.data.test_fraction),
                              cfg.data.split_seed)
        part = {"train": split.train, "val": split.validation,
                "test": split.test}[phase]
        return pool, part
    if cfg.data.split != "none":
        raise ConfigurationError(
            f"data.split must be 'none' or 'classes', got {cfg.data.split!r}")
    fresh = "eval-pool" if (phase == "test" and cfg.data.source == "synthetic") else None
    pool = _load_pool(cfg, spec, fresh_tag=fresh)
    return pool, tuple(pool.class_labels)


def mixture_for_family(cfg: RunConfig, family_index: int = 0):
    name, spec = family_specs(cfg)[family_index]
    return name, mixture_from_spec(spec)
