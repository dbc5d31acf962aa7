"""Evaluate trained models on a split and write report / feature files."""

from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from .data import WindowedDataset
from .metrics import EvalReport, PredictionSet, aggregate_per_subject, davies_bouldin, pca_project
from .network import DualBranchModel, export_features, predict_proba


def evaluate(model: DualBranchModel, dataset: WindowedDataset, split: Optional[str] = None,
             with_dbi: bool = True) -> EvalReport:
    """Pattern metrics per subject (then averaged) plus the pooled DBI of the
    pattern-specific features."""
    probs = predict_proba(model, dataset.windows, "p")
    preds = PredictionSet(probs, dataset.pattern_index, dataset.subject_id)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = aggregate_per_subject(preds)
    report.split = split or dataset.split
    if with_dbi:
        feats = export_features(model, dataset.windows, "pattern")
        try:
            report.dbi = davies_bouldin(feats, dataset.pattern_index)
        except (ZeroDivisionError, ValueError):
            report.dbi = None
    return report


def subject_accuracy(model: DualBranchModel, dataset: WindowedDataset) -> Optional[float]:
    """Subject-classifier accuracy on windows of training subjects only."""
    if not model.variant.has_subject_branch:
        return None
    known = dataset.subject_index >= 0
    if not known.any():
        return None
    probs = predict_proba(model, dataset.windows[known], "s")
    return float(np.mean(probs.argmax(axis=1) == dataset.subject_index[known]))


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def write_report(report: EvalReport, out_dir, stem: str = "report") -> tuple[Path, Path]:
    """Per-subject CSV (plus a ``mean`` summary row) and a JSON mirror."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["split", "subject_id", "n_windows", "accuracy", "f1", "auroc", "dbi"])
        for r in report.rows:
            w.writerow([report.split, r.subject_id, r.n_samples, _num(r.accuracy), _num(r.f1), _num(r.auroc), ""])
        w.writerow([report.split, "mean", sum(r.n_samples for r in report.rows), _num(report.accuracy),
                    _num(report.f1), _num(report.auroc), _num(report.dbi)])
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def write_features(model: DualBranchModel, dataset: WindowedDataset, which: str, out_dir,
                   stem: Optional[str] = None) -> tuple[Path, Path]:
    """Feature CSV (subject_id, gesture_id, f0..) and its 2-D PCA projection CSV."""
    feats = export_features(model, dataset.windows, which)
    proj = pca_project(feats, 2)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"features_{which}"
    feat_path, proj_path = out / f"{stem}.csv", out / f"{stem}_pca.csv"
    gestures = dataset.gesture_of
    with open(feat_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subject_id", "gesture_id"] + [f"f{i}" for i in range(feats.shape[1])])
        for sid, gid, row in zip(dataset.subject_id, gestures, feats):
            w.writerow([int(sid), int(gid)] + [repr(float(x)) for x in row])
    with open(proj_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subject_id", "gesture_id", "pca0", "pca1"])
        for sid, gid, row in zip(dataset.subject_id, gestures, proj):
            w.writerow([int(sid), int(gid), repr(float(row[0])), repr(float(row[1]))])
    return feat_path, proj_path
