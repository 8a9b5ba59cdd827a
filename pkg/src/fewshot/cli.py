"""Command-line entry point.

Subcommands cover the full pipeline: ``gen-data``, ``train``, ``eval``,
``ablate``, ``curves``, ``xval``, ``oracle``. Every command resolves its
configuration (file values overridden by flags), writes the resolved copy
into the output directory, and never mutates its inputs. Exit code 0 on
success; otherwise a single ``error: ...`` line goes to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .autodiff import SPDFactorizationError
from .checkpoint import CheckpointError, load_checkpoint
from .config import (RunConfig, apply_overrides, config_fingerprint,
                     config_text, dataset_for_phase, family_specs,
                     load_config, mixture_for_family)
from .datasets import (ConfigurationError, IdxFormatError, generate_synthetic,
                       kfold_splits, mixture_from_spec)
from .episodes import EpisodeProtocol, SamplingError, episode_stream
from .evaluate import (EvaluationError, SHOT_BUCKETS, ablation_table,
                       accuracy_by_shots, accuracy_by_ways, evaluate,
                       count_trainable_params, read_results, write_ablation_csv,
                       write_curve_csv, write_results)
from .model import FewShotClassifier
from .oracles import bayes_optimal_accuracy, nearest_mean_accuracy
from .train import (TrainingDivergedError, train, stream_seed)
from .verify import invariant_suite

_ERRORS = (ConfigurationError, SamplingError, EvaluationError, IdxFormatError,
           CheckpointError, TrainingDivergedError, SPDFactorizationError,
           FileNotFoundError, NotADirectoryError)


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="configuration file")
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--workers", type=int, default=None,
                   help="episode-level parallelism (1 = bit-exact)")
    p.add_argument("--head", type=str, default=None,
                   help="head variant, e.g. mahalanobis, mahalanobis-tr, l2, "
                        "l1, cosine, dot, linear; append +p for projection")
    p.add_argument("--beta", type=float, default=None, help="covariance ridge")
    p.add_argument("--no-adapt", action="store_true",
                   help="disable the feature-extractor adaptation network")
    p.add_argument("--autoregressive", action="store_true",
                   help="autoregressive block-level adaptation")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, out=args.out, seed=args.seed,
                          workers=args.workers, head=args.head, beta=args.beta,
                          no_adapt=args.no_adapt,
                          autoregressive=args.autoregressive)
    return cfg.resolved()


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(config_text(cfg))
    return out


def _build_model(cfg: RunConfig) -> FewShotClassifier:
    return FewShotClassifier(cfg.backbone, cfg.head, seed=cfg.seed)


def _train_once(cfg: RunConfig, out: Path, tag: str = "") -> tuple[Path, float]:
    """Train under a resolved config; returns (checkpoint path, best val acc)."""
    model = _build_model(cfg)
    train_ds, train_classes = dataset_for_phase(cfg, "train")
    val_ds, val_classes = dataset_for_phase(cfg, "val")
    result = train(model, train_ds, train_classes, cfg.protocol, cfg.train,
                   val_dataset=val_ds, val_classes=val_classes)
    suffix = f".{tag}" if tag else ""
    log_path = out / f"train_log{suffix}.csv"
    log_path.write_text(result.log_csv())
    ckpt_path = out / f"checkpoint{suffix}.bin"
    model.load_parameters(result.best_params)
    model.save(ckpt_path, meta={
        "episode": result.best_episode,
        "val_accuracy": result.best_val_accuracy,
        "config_fingerprint": config_fingerprint(cfg),
    })
    return ckpt_path, result.best_val_accuracy


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    if cfg.data.source != "synthetic":
        raise ConfigurationError("gen-data requires data.source = synthetic")
    out = _prepare_out(cfg)
    for name, spec in family_specs(cfg):
        dataset, truth = generate_synthetic(spec)
        np.savez(out / f"{name}.npz", examples=dataset.examples,
                 labels=dataset.labels)
        np.savez(out / f"{name}.truth.npz", means=truth.means,
                 covariances=truth.covariances, weights=truth.weights)
        print(f"gen-data: family={name} examples={dataset.examples.shape[0]} "
              f"dim={dataset.dim} classes={len(dataset.class_labels)}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    ckpt, best = _train_once(cfg, out)
    print(f"train: best_val_accuracy={best:.4f} checkpoint={ckpt}")
    return 0


def _eval_stream(cfg: RunConfig, family_index: int = 0):
    test_ds, test_classes = dataset_for_phase(cfg, "test", family_index)
    seed = stream_seed(cfg.seed, "test")
    return episode_stream(test_ds, test_classes, cfg.protocol,
                          cfg.eval_episodes, seed)


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    ckpt_path = args.checkpoint or str(Path(cfg.out) / "checkpoint.bin")
    model, meta = FewShotClassifier.load(ckpt_path, cfg.backbone, cfg.head,
                                         seed=cfg.seed)
    expected = config_fingerprint(cfg)
    if meta.get("config_fingerprint") not in (None, expected):
        raise ConfigurationError(
            f"checkpoint was trained under fingerprint "
            f"{meta.get('config_fingerprint')}, current config is {expected}")
    summary = evaluate(model, _eval_stream(cfg), workers=cfg.workers)
    write_results(out / "results.jsonl", summary.results)
    (out / "summary.csv").write_text(
        "accuracy,ci_halfwidth,n_tasks\n"
        f"{repr(summary.mean_accuracy)},{repr(summary.ci_halfwidth)},"
        f"{summary.n_tasks}\n")
    print(f"eval: accuracy={summary.mean_accuracy:.4f} "
          f"ci={summary.ci_halfwidth:.4f} n_tasks={summary.n_tasks}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigurationError("ablate needs at least one variant")
    results = {}
    for variant in variants:
        vcfg = apply_overrides(_resolve(args), head=variant)
        vcfg.out = str(Path(cfg.out) / variant.replace("+", "_"))
        vcfg = vcfg.resolved()
        vout = _prepare_out(vcfg)
        ckpt, _ = _train_once(vcfg, vout)
        model, _ = FewShotClassifier.load(ckpt, vcfg.backbone, vcfg.head,
                                          seed=vcfg.seed)
        summary = evaluate(model, _eval_stream(vcfg), workers=cfg.workers)
        write_results(vout / "results.jsonl", summary.results)
        results[variant] = {cfg.data.name: summary}
        print(f"ablate: variant={variant} accuracy={summary.mean_accuracy:.4f} "
              f"ci={summary.ci_halfwidth:.4f}")
    rows = ablation_table(results)
    write_ablation_csv(out / "ablation.csv", rows)
    return 0


def cmd_curves(args) -> int:
    results = read_results(args.results)
    out = Path(args.out or Path(args.results).parent)
    out.mkdir(parents=True, exist_ok=True)
    buckets = SHOT_BUCKETS if args.bucket_shots else None
    write_curve_csv(out / "shots.csv", accuracy_by_shots(results, buckets=buckets))
    write_curve_csv(out / "ways.csv", accuracy_by_ways(results))
    print(f"curves: wrote {out / 'shots.csv'} and {out / 'ways.csv'}")
    return 0


def cmd_xval(args) -> int:
    cfg = _resolve(args)
    if cfg.data.families < 2:
        raise ConfigurationError(
            "xval needs data.families >= 2 (named dataset list to fold over)")
    out = _prepare_out(cfg)
    names = [name for name, _ in family_specs(cfg)]
    folds = kfold_splits(names, args.k, seed=cfg.seed)
    lines = ["fold,family,domain,accuracy,ci_halfwidth"]
    for fold_index, (in_domain, held_out) in enumerate(folds):
        fold_cfg = _resolve(args)
        fold_cfg.out = str(Path(cfg.out) / f"fold{fold_index}")
        fold_cfg = fold_cfg.resolved()
        fold_out = _prepare_out(fold_cfg)
        model = _build_model(fold_cfg)
        index_of = {name: i for i, name in enumerate(names)}
        train_sets = [dataset_for_phase(fold_cfg, "train", index_of[n])[0]
                      for n in in_domain]
        # Interleave training episodes across the in-domain families.
        from .episodes import mixed_episode_stream  # local import, small helper
        train_cfg = fold_cfg.train
        train_cfg.validate()
        mixed = mixed_episode_stream(
            list(zip(in_domain, train_sets)), fold_cfg.protocol,
            train_cfg.episodes, stream_seed(fold_cfg.seed, "train"))
        _train_on_stream(model, mixed, fold_cfg)
        for name in names:
            test_ds, test_classes = dataset_for_phase(fold_cfg, "test",
                                                      index_of[name])
            stream = episode_stream(test_ds, test_classes, fold_cfg.protocol,
                                    fold_cfg.eval_episodes,
                                    stream_seed(fold_cfg.seed, f"test-{name}"))
            summary = evaluate(model, stream, workers=cfg.workers)
            domain = "out" if name in held_out else "in"
            lines.append(f"{fold_index},{name},{domain},"
                         f"{repr(summary.mean_accuracy)},"
                         f"{repr(summary.ci_halfwidth)}")
        model.save(fold_out / "checkpoint.bin",
                   meta={"config_fingerprint": config_fingerprint(fold_cfg)})
        print(f"xval: fold={fold_index} held_out={','.join(held_out)}")
    (out / "xval.csv").write_text("\n".join(lines) + "\n")
    return 0


def _train_on_stream(model: FewShotClassifier, named_episodes, cfg: RunConfig) -> None:
    """Plain Adam loop over a pre-built episode stream (used by xval)."""
    from .train import AdamState, adam_step, _batch_pass
    params = model.named_parameters()
    state = AdamState(params)
    batch = []
    tc = cfg.train
    for _, episode in named_episodes:
        batch.append(episode)
        if len(batch) == tc.batch_size:
            loss, grads = _batch_pass(model, batch, tc.workers)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite batch loss {loss}", [ep.seed for ep in batch],
                    model.head_cfg.variant, model.last_condition_numbers())
            adam_step(params, grads, state, tc.learning_rate, tc.beta1,
                      tc.beta2, tc.eps)
            batch = []


def cmd_oracle(args) -> int:
    cfg = _resolve(args)
    if cfg.data.source != "synthetic":
        raise ConfigurationError("oracle requires data.source = synthetic")
    out = _prepare_out(cfg)
    lines = ["family,oracle_accuracy,ci"]
    for index, (name, spec) in enumerate(family_specs(cfg)):
        mixture = mixture_from_spec(spec)
        bayes_acc, bayes_ci = bayes_optimal_accuracy(
            mixture, seed=stream_seed(cfg.seed, f"oracle-{name}"))
        iso_acc, iso_ci = nearest_mean_accuracy(
            mixture, seed=stream_seed(cfg.seed, f"oracle-iso-{name}"))
        lines.append(f"{name},{repr(bayes_acc)},{repr(bayes_ci)}")
        lines.append(f"{name}/isotropic,{repr(iso_acc)},{repr(iso_ci)}")
        print(f"oracle: family={name} bayes={bayes_acc:.4f}±{bayes_ci:.4f} "
              f"isotropic={iso_acc:.4f}±{iso_ci:.4f}")
    (out / "oracle.csv").write_text("\n".join(lines) + "\n")

    checks = invariant_suite(seed=cfg.seed)
    report = []
    all_passed = True
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        line = f"{status} {check.name} {check.detail}"
        report.append(line)
        print(f"oracle: {line}")
        all_passed &= check.passed
    (out / "invariants.txt").write_text("\n".join(report) + "\n")
    return 0 if all_passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewshot",
        description="Episodic few-shot classification with metric heads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize synthetic pools + ground truth")
    _add_common_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="episodic training, best-on-validation")
    _add_common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test stream")
    _add_common_flags(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train+evaluate several head variants on "
                                      "paired episode streams")
    _add_common_flags(p)
    p.add_argument("--variants", type=str, required=True,
                   help="comma-separated head variants")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("curves", help="accuracy-vs-shots/ways CSVs from results")
    p.add_argument("--results", type=str, required=True)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--bucket-shots", action="store_true",
                   help="group shots into geometric buckets")
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("xval", help="k-fold cross-validation over data families")
    _add_common_flags(p)
    p.add_argument("--k", type=int, default=4)
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("oracle", help="Bayes/isotropic ceilings + invariant suite")
    _add_common_flags(p)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
