"""Command line entry point.

Subcommands
-----------
generate   write a synthetic corpus file from a generator spec
crossval   run the 5-fold subject-grouped protocol and write a summary
train      fit one fold of a fold plan and write a checkpoint
evaluate   score a saved checkpoint on a corpus file
report     render a run directory as json, csv, or a markdown table

Every training-style run gets a fresh timestamped directory under
``--out-dir`` with exactly one ``manifest.json`` (command, resolved config,
seeds, paths, version, duration).  Result payloads (``summary.json``,
``evaluation.json``) carry no timestamps, so identical runs are
byte-identical.  Exit codes: 0 success, 1 IO or data failure, 2 usage.

The default seed is 42; the ``COGFUSE_SEED`` environment variable
overrides it, and an explicit ``--seed`` flag or config value overrides
both.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import fields
from datetime import datetime
from pathlib import Path

from . import __version__
from . import train as T
from .data import (
    FoldPlan,
    SyntheticSpec,
    fold_split,
    generate_synthetic,
    load_corpus,
    save_corpus,
    split_folds,
)
from .estimators import load_estimator, make_estimator
from .exceptions import ConfigurationError
from .metrics import CLASSIFICATION_METRICS, REGRESSION_METRICS, format_mean_sd
from .models import TASKS, VARIANTS
from .train import TrainConfig, evaluate_estimator

DEFAULT_SEED = 42

TRAIN_KEYS = ("learning_rate", "weight_decay", "batch_size", "max_epochs", "patience", "seed")
MODEL_KEYS = (
    "seq_len",
    "embed_dim",
    "n_heads",
    "audio_dim",
    "hidden",
    "encoder_layers",
    "ffn_mult",
    "text_branch",
    "text_learning_rate",
    "audio_learning_rate",
    "finetune_branches",
)

METRIC_LABELS = {
    "uar": "UAR",
    "f1": "F1",
    "specificity": "Specificity",
    "sensitivity": "Sensitivity",
    "precision": "Precision",
    "rmse": "RMSE",
    "r2": "R2",
}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve_seed(flag: int | None, config_value=None) -> int:
    if flag is not None:
        return flag
    if config_value is not None:
        return int(config_value)
    env = os.environ.get("COGFUSE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"COGFUSE_SEED must be an integer, got {env!r}")
    return DEFAULT_SEED


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config must be a flat JSON object")
    return doc


def _split_config(doc: dict, path) -> tuple[dict, dict]:
    """Separate a flat config document into train and model settings."""
    train_kwargs: dict = {}
    model_kwargs: dict = {}
    for key, value in doc.items():
        if key in TRAIN_KEYS:
            train_kwargs[key] = value
        elif key in MODEL_KEYS:
            model_kwargs[key] = tuple(value) if key == "hidden" else value
        else:
            raise ConfigurationError(f"{path}: unknown config key {key!r}")
    return train_kwargs, model_kwargs


def _new_run_dir(base, command: str) -> Path:
    base = Path(base)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    path = base / f"{command}-{stamp}"
    suffix = 0
    while path.exists():
        suffix += 1
        path = base / f"{command}-{stamp}-{suffix}"
    path.mkdir(parents=True)
    return path


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_history_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss"])
        writer.writeheader()
        writer.writerows(history)


def _write_manifest(run_dir: Path, command: str, config: dict, seeds: dict, inputs: dict, outputs: dict, t0: float) -> None:
    _write_json(
        run_dir / "manifest.json",
        {
            "command": command,
            "config": config,
            "seeds": seeds,
            "inputs": inputs,
            "outputs": outputs,
            "version": __version__,
            "created": datetime.now().isoformat(timespec="seconds"),
            "duration_s": round(time.time() - t0, 3),
        },
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec_doc: dict = {}
    if args.spec is not None:
        spec_doc = _load_config_file(args.spec)
        allowed = {f.name for f in fields(SyntheticSpec)}
        unknown = set(spec_doc) - allowed
        if unknown:
            raise ConfigurationError(f"{args.spec}: unknown generator keys {sorted(unknown)}")
    spec_doc["seed"] = _resolve_seed(args.seed, spec_doc.get("seed"))
    corpus = generate_synthetic(SyntheticSpec(**spec_doc))
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.records)} records ({len(corpus.subject_ids())} subjects) to {args.out}")
    return 0


def _prepare_run(args) -> tuple[list, TrainConfig, dict]:
    """Shared corpus + config assembly for crossval and train."""
    corpus = load_corpus(args.corpus)
    config_doc = _load_config_file(args.config) if args.config else {}
    train_kwargs, model_kwargs = _split_config(config_doc, args.config)
    train_kwargs["seed"] = _resolve_seed(args.seed, train_kwargs.get("seed"))
    if getattr(args, "learning_rate", None) is not None:
        train_kwargs["learning_rate"] = args.learning_rate
    return corpus.records, TrainConfig(**train_kwargs), model_kwargs


def cmd_crossval(args) -> int:
    t0 = time.time()
    records, cfg, model_kwargs = _prepare_run(args)
    result = T.crossval(
        records,
        args.variant,
        args.task,
        cfg,
        model_kwargs,
        n_folds=args.folds,
        subject_mean=args.subject_mean,
    )
    run_dir = _new_run_dir(args.out_dir, "crossval")
    _write_json(run_dir / "summary.json", result.summary_payload())
    _write_json(run_dir / "fold_plan.json", result.plan.to_dict())
    for outcome in result.folds:
        fold_dir = run_dir / "folds" / f"fold{outcome.fold}"
        fold_dir.mkdir(parents=True)
        outcome.estimator.save(fold_dir / "checkpoint.json")
        _write_history_csv(fold_dir / "history.csv", outcome.estimator.history_)
    _write_manifest(
        run_dir,
        "crossval",
        {"train": cfg.to_dict(), "model": {k: list(v) if isinstance(v, tuple) else v for k, v in model_kwargs.items()},
         "variant": args.variant, "task": args.task, "folds": args.folds,
         "subject_mean": args.subject_mean},
        {"train": cfg.seed, "folds": result.plan.seed},
        {"corpus": str(args.corpus), "config": str(args.config) if args.config else None},
        {"summary": "summary.json", "fold_plan": "fold_plan.json", "folds": "folds"},
        t0,
    )
    names = CLASSIFICATION_METRICS if args.task == "cls" else REGRESSION_METRICS
    line = "  ".join(
        f"{METRIC_LABELS[m]} {format_mean_sd(result.summary[m]['mean'], result.summary[m]['sd'], percent=args.task == 'cls')}"
        for m in names
    )
    print(f"{args.variant}/{args.task} {result.n_folds}-fold: {line}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_train(args) -> int:
    t0 = time.time()
    records, cfg, model_kwargs = _prepare_run(args)
    records = sorted(records, key=lambda r: r.sample_id)
    if os.path.exists(args.folds):
        with open(args.folds, "r", encoding="utf-8") as fh:
            plan = FoldPlan.from_dict(json.load(fh))
    else:
        try:
            n_folds = int(args.folds)
        except ValueError:
            raise FileNotFoundError(f"fold plan {args.folds!r} not found")
        plan = split_folds(records, n_folds, cfg.seed)
    train_recs, val_recs = fold_split(records, plan, args.val_fold)
    overrides = {
        "seq_len": records[0].subject_seq.shape[0],
        "embed_dim": records[0].subject_seq.shape[1],
        "audio_dim": records[0].audio_feat.shape[0],
    }
    overrides.update(model_kwargs)
    est = make_estimator(args.variant, args.task, overrides, cfg)
    est.fit(train_recs, validation=val_recs)
    report = evaluate_estimator(est, val_recs, subject_mean=args.subject_mean)

    run_dir = _new_run_dir(args.out_dir, "train")
    est.save(run_dir / "checkpoint.json")
    _write_history_csv(run_dir / "history.csv", est.history_)
    _write_json(run_dir / "fold_plan.json", plan.to_dict())
    _write_json(
        run_dir / "fit.json",
        {
            "variant": args.variant,
            "task": args.task,
            "val_fold": args.val_fold,
            "best_epoch": est.best_epoch_,
            "stopped_epoch": est.stopped_epoch_,
            "best_val_loss": est.best_val_loss_,
            "validation": report.to_dict(),
            "history": est.history_,
        },
    )
    _write_manifest(
        run_dir,
        "train",
        {"train": cfg.to_dict(), "model": {k: list(v) if isinstance(v, tuple) else v for k, v in model_kwargs.items()},
         "variant": args.variant, "task": args.task, "val_fold": args.val_fold},
        {"train": cfg.seed, "folds": plan.seed},
        {"corpus": str(args.corpus), "folds": str(args.folds),
         "config": str(args.config) if args.config else None},
        {"checkpoint": "checkpoint.json", "fit": "fit.json", "fold_plan": "fold_plan.json",
         "history": "history.csv"},
        t0,
    )
    print(f"best epoch {est.best_epoch_}, stopped at {est.stopped_epoch_}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    t0 = time.time()
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "checkpoint.json"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    est = load_estimator(ckpt)
    corpus = load_corpus(args.corpus)
    report = evaluate_estimator(est, corpus.records, subject_mean=args.subject_mean)
    doc = {
        "task": est.task,
        "variant": est.variant,
        "aggregation": "subject" if args.subject_mean else "sample",
        "n_records": len(corpus.records),
        "n_subjects": len(corpus.subject_ids()),
        **report.to_dict(),
    }
    run_dir = _new_run_dir(args.out_dir, "evaluate")
    _write_json(run_dir / "evaluation.json", doc)
    _write_manifest(
        run_dir,
        "evaluate",
        {"subject_mean": args.subject_mean},
        {},
        {"checkpoint": str(ckpt), "corpus": str(args.corpus)},
        {"evaluation": "evaluation.json"},
        t0,
    )
    print(json.dumps(doc, indent=2, sort_keys=True))
    print(f"run directory: {run_dir}", file=sys.stderr)
    return 0


def _metric_names(task: str) -> tuple[str, ...]:
    return CLASSIFICATION_METRICS if task == "cls" else REGRESSION_METRICS


def _render_markdown(doc: dict) -> str:
    task = doc["task"]
    names = _metric_names(task)
    percent = task == "cls"
    header = "| Model | " + " | ".join(METRIC_LABELS[m] for m in names) + " |"
    rule = "|" + "---|" * (len(names) + 1)
    if "summary" in doc:
        caption = f"{doc['n_folds']}-fold cross-validation, {doc['aggregation']}-level metrics (mean ± SD)"
        cells = [format_mean_sd(doc["summary"][m]["mean"], doc["summary"][m]["sd"], percent=percent) for m in names]
    else:
        caption = f"held-out evaluation, {doc['aggregation']}-level metrics"
        scale = 100.0 if percent else 1.0
        cells = [f"{doc[m] * scale:.2f}" for m in names]
    row = f"| {doc['variant']} | " + " | ".join(cells) + " |"
    return "\n".join([caption, "", header, rule, row])


def _render_csv(doc: dict, out) -> None:
    names = _metric_names(doc["task"])
    writer = csv.writer(out)
    if "summary" in doc:
        writer.writerow(["fold", "n_records", "n_subjects", "best_epoch", "stopped_epoch", *names])
        for fold in doc["folds"]:
            writer.writerow(
                [fold["fold"], fold["n_records"], fold["n_subjects"], fold["best_epoch"], fold["stopped_epoch"]]
                + [fold[m] for m in names]
            )
        writer.writerow(["mean", "", "", "", ""] + [doc["summary"][m]["mean"] for m in names])
        writer.writerow(["sd", "", "", "", ""] + [doc["summary"][m]["sd"] for m in names])
    else:
        writer.writerow(["n_records", "n_subjects", *names])
        writer.writerow([doc["n_records"], doc["n_subjects"]] + [doc[m] for m in names])


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    for name in ("summary.json", "evaluation.json"):
        path = run_dir / name
        if path.exists():
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            break
    else:
        raise FileNotFoundError(f"{run_dir} holds neither summary.json nor evaluation.json")
    if args.format == "json":
        print(json.dumps(doc, indent=2, sort_keys=True))
    elif args.format == "csv":
        _render_csv(doc, sys.stdout)
    else:
        print(_render_markdown(doc))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogfuse", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"cogfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    p.add_argument("--spec", help="JSON file of generator settings")
    p.add_argument("--out", required=True, help="corpus file to write")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.set_defaults(func=cmd_generate)

    def add_shared(p):
        p.add_argument("--corpus", required=True, help="corpus file")
        p.add_argument("--variant", required=True, choices=sorted(VARIANTS))
        p.add_argument("--task", required=True, choices=sorted(TASKS))
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--subject-mean", action="store_true", help="pool the 3 records per subject")
        p.add_argument("--seed", type=int, help="override the training seed")
        p.add_argument("--learning-rate", type=float, help="override the learning rate")
        p.add_argument("--out-dir", default="runs", help="parent directory for run directories")

    p = sub.add_parser("crossval", help="run the 5-fold protocol")
    add_shared(p)
    p.add_argument("--folds", type=int, default=5, help="number of folds")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("train", help="fit one fold and save a checkpoint")
    add_shared(p)
    p.add_argument("--folds", required=True, help="fold plan file, or a fold count to deal one")
    p.add_argument("--val-fold", required=True, type=int, help="fold index held out for validation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--corpus", required=True, help="corpus file")
    p.add_argument("--subject-mean", action="store_true", help="pool the 3 records per subject")
    p.add_argument("--out-dir", default="runs", help="parent directory for run directories")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render a run directory")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--format", default="md", choices=("json", "csv", "md"))
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"cogfuse: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"cogfuse: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
