"""Command-line interface: synth, train, eval, embed, crossval.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
The default output directory is ``$EMGDISENT_OUTPUT_DIR`` (else ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .data import (DataError, FoldPlan, SynthConfig, build_fold, load_manifest, make_folds, manifest_exclusions,
                   save_dataset, synthesize)
from .evaluation import evaluate, subject_accuracy, write_features, write_report
from .network import CheckpointError, UnsupportedVariantError, Variant, load_checkpoint
from .training import ConfigError, TrainConfig, TrainingDivergedError, train

OUTPUT_ENV = "EMGDISENT_OUTPUT_DIR"
METRICS = ("accuracy", "f1", "auroc", "dbi")


class UsageError(Exception):
    """Bad arguments that argparse itself cannot catch."""


def _default_out() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# -- synth -------------------------------------------------------------------------


def _synth_config(args) -> SynthConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {"n_subjects": args.subjects, "n_gestures": args.gestures, "trials": args.trials,
                 "duration": args.duration, "noise": args.noise, "mixing": args.mixing, "seed": args.seed}
    base.update({k: v for k, v in overrides.items() if v is not None})
    return SynthConfig.from_dict(base)


def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    out = Path(args.out) if args.out else _default_out() / "synth"
    path = save_dataset(synthesize(cfg), out, extra={"synth_config": cfg.to_dict()})
    print(f"wrote {path}")
    return 0


# -- train ---------------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {"variant": args.variant, "epochs": args.epochs, "batch_size": args.batch_size,
                 "learning_rate": args.lr, "seed": args.seed}
    base.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(base).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _folds(text: str) -> list[int]:
    if text == "all":
        return [0, 1, 2, 3]
    try:
        k = int(text)
    except ValueError:
        raise UsageError(f"--fold must be 0-3 or 'all', got {text!r}")
    if not 0 <= k < 4:
        raise UsageError(f"--fold must be 0-3 or 'all', got {k}")
    return [k]


def _load_data(path):
    if path is None:
        raise UsageError("a dataset path is required (--data)")
    return load_manifest(path), manifest_exclusions(path)


def _train_fold(recordings, excluded, config: TrainConfig, fold: int, out: Path, window: int, step: int):
    """Train one fold with seed ``config.seed + fold``; writes into ``out``."""
    subjects = sorted({r.subject_id for r in recordings})
    plan = make_folds(subjects, 4, config.seed)
    fold_cfg = TrainConfig.from_dict({**config.to_dict(), "seed": config.seed + fold})
    try:
        return train(recordings, plan, fold, fold_cfg, out, window, step, exclude_subjects=excluded)
    except TrainingDivergedError as exc:
        _write_json(out / "diverged.json", {"fold": fold, **exc.snapshot})
        raise RuntimeError(f"fold {fold}: {exc}") from exc


def cmd_train(args) -> int:
    recordings, excluded = _load_data(args.data)
    config = _train_config(args)
    folds = _folds(args.fold)
    out = Path(args.out) if args.out else _default_out() / f"train_{config.variant}"
    for k in folds:
        res = _train_fold(recordings, excluded, config, k, out / f"fold{k}", args.window, args.step)
        last = res.state.history[-1]
        print(f"fold {k}: {res.checkpoint} (final L_p_cls={last['L_p_cls']:.4f})")
    return 0


# -- eval / embed ------------------------------------------------------------------


def _fold_from_checkpoint(path, data_path, split: str):
    model, meta = load_checkpoint(path)
    if "fold_plan" not in meta:
        raise CheckpointError(f"{path}: no fold metadata; was it written by 'train'?")
    recordings, _ = _load_data(data_path)
    plan = FoldPlan.from_dict(meta["fold_plan"])
    known = set(plan.assignments)
    present = {r.subject_id for r in recordings}
    if not present <= known:
        raise DataError(f"dataset subjects {sorted(present - known)} are not in the checkpoint's fold plan")
    train_set, test_set = build_fold(recordings, plan, meta["fold"], meta["window"], meta["step"],
                                     meta["normalize"], meta.get("exclude_subjects", ()))
    if train_set.gesture_ids != meta["gesture_ids"]:
        raise DataError(f"dataset gestures {train_set.gesture_ids} != checkpoint gestures {meta['gesture_ids']}")
    if train_set.windows.shape[1:] != (model.window_length, model.n_channels):
        raise DataError(f"window shape {train_set.windows.shape[1:]} does not fit the model "
                        f"({model.window_length}, {model.n_channels})")
    return model, meta, (train_set if split == "train" else test_set)


def cmd_eval(args) -> int:
    model, meta, ds = _fold_from_checkpoint(args.checkpoint, args.data, args.split)
    if len(ds) == 0:
        raise DataError(f"{args.split} split of fold {meta['fold']} has no windows")
    report = evaluate(model, ds, split=args.split)
    report.extra = {"fold": meta["fold"], "variant": model.variant.value,
                    "subject_accuracy": subject_accuracy(model, ds) if args.split == "train" else None}
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    csv_path, _ = write_report(report, out, f"report_{args.split}")
    print(f"{args.split}: accuracy={report.accuracy:.4f} f1={report.f1:.4f} -> {csv_path}")
    return 0


def cmd_embed(args) -> int:
    model, meta, ds = _fold_from_checkpoint(args.checkpoint, args.data, args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    feat, proj = write_features(model, ds, args.which, out, f"features_{args.which}_{args.split}")
    print(f"wrote {feat} and {proj}")
    return 0


# -- crossval ----------------------------------------------------------------------


def crossval_summary(results: dict) -> tuple[list[list], dict]:
    """Rows ``method, metric, fold0..fold3, mean`` plus a nested JSON mirror."""
    rows, mirror = [], {}
    for method, per_fold in results.items():
        mirror[method] = {}
        folds = sorted(per_fold)
        for metric in METRICS:
            vals = [per_fold[k][metric] for k in folds]
            done = [v for v in vals if v is not None]
            mean = sum(done) / len(done) if done else None
            rows.append([method, metric] + vals + [mean])
            mirror[method][metric] = {"folds": {str(k): v for k, v in zip(folds, vals)}, "mean": mean}
    return rows, mirror


def cmd_crossval(args) -> int:
    recordings, excluded = _load_data(args.data)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        try:
            Variant(v)
        except ValueError:
            raise UsageError(f"unknown variant {v!r}; choose from {[x.value for x in Variant]}")
    out = Path(args.out) if args.out else _default_out() / "crossval"
    folds = _folds(args.fold)
    results = {}
    for v in variants:
        args.variant = v
        config = _train_config(args)
        _write_json(out / v / "config.json", config.to_dict())
        results[v] = {}
        for k in folds:
            res = _train_fold(recordings, excluded, config, k, out / v / f"fold{k}", args.window, args.step)
            report = evaluate(res.model, res.test_set)
            report.extra = {"fold": k, "variant": v}
            write_report(report, out / v / f"fold{k}", "report_test")
            results[v][k] = {m: getattr(report, m) for m in METRICS}
            print(f"{v} fold {k}: accuracy={report.accuracy:.4f} f1={report.f1:.4f} dbi={report.dbi}")
    rows, mirror = crossval_summary(results)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "metric"] + [f"fold{k}" for k in folds] + ["mean"])
        for r in rows:
            w.writerow([("" if x is None else repr(float(x)) if isinstance(x, float) else x) for x in r])
    _write_json(out / "summary.json", mirror)
    print(f"wrote {out / 'summary.csv'}")
    return 0


# -- parser ------------------------------------------------------------------------


def _add_train_options(p: argparse.ArgumentParser, variant_flag: bool = True) -> None:
    p.add_argument("--data", help="dataset directory or manifest.json")
    p.add_argument("--config", help="JSON file with training settings; flags override it")
    if variant_flag:
        p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--fold", "--folds", dest="fold", default="0", help="fold index 0-3 or 'all'")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="SGD learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--window", type=int, default=408, help="window length in samples")
    p.add_argument("--step", type=int, default=20, help="window step in samples")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emgdisent", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-subject dataset")
    p.add_argument("--config", help="JSON file with generator settings; flags override it")
    p.add_argument("--subjects", type=int)
    p.add_argument("--gestures", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--duration", type=float, help="seconds per recording")
    p.add_argument("--noise", type=float, help="noise standard deviation")
    p.add_argument("--mixing", type=float, help="subject-mixing strength")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one fold or all four")
    _add_train_options(p)
    p.set_defaults(func=cmd_train, variant=None)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint on its fold"),
                                 ("embed", cmd_embed, "export features and their PCA projection")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=["test", "train"], default="test")
        p.add_argument("--out")
        if name == "embed":
            p.add_argument("--which", choices=["original", "pattern", "subject"], default="pattern")
        p.set_defaults(func=func)

    p = sub.add_parser("crossval", help="train and evaluate variants over the folds")
    _add_train_options(p, variant_flag=False)
    p.add_argument("--variants", default="proposed,erm,ponly,mtl", help="comma-separated variant list")
    p.set_defaults(func=cmd_crossval, fold="all")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"emgdisent: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, RuntimeError, OSError) as exc:
        print(f"emgdisent: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ConfigError, UnsupportedVariantError, json.JSONDecodeError) as exc:
        print(f"emgdisent: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
