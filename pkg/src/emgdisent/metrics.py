"""Classification metrics, Davies-Bouldin index, per-subject aggregation, PCA."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


@dataclass
class PredictionSet:
    probabilities: np.ndarray  # (N, K)
    labels: np.ndarray  # (N,) class indices
    subject_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probabilities.ndim != 2 or len(self.labels) != len(self.probabilities):
            raise ValueError("probabilities must be (N, K) with one label per row")
        if self.subject_ids is not None:
            self.subject_ids = np.asarray(self.subject_ids)

    @property
    def n_classes(self) -> int:
        return self.probabilities.shape[1]

    @property
    def predicted(self) -> np.ndarray:
        # argmax already returns the lowest index among ties
        return self.probabilities.argmax(axis=1)

    def subset(self, mask) -> "PredictionSet":
        sid = None if self.subject_ids is None else self.subject_ids[mask]
        return PredictionSet(self.probabilities[mask], self.labels[mask], sid)


def accuracy(preds: PredictionSet) -> float:
    if len(preds.labels) == 0:
        raise UndefinedMetricError("accuracy of an empty prediction set")
    return float(np.mean(preds.predicted == preds.labels))


def confusion_matrix(labels: np.ndarray, predicted: np.ndarray, k: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    return np.bincount(labels * k + predicted, minlength=k * k).reshape(k, k)


def macro_f1(preds: PredictionSet) -> float:
    """Unweighted mean of per-class F1 over all K classes.

    A class with no true and no predicted samples scores 0.
    """
    if len(preds.labels) == 0:
        raise UndefinedMetricError("F1 of an empty prediction set")
    k = preds.n_classes
    cm = confusion_matrix(preds.labels, preds.predicted, k)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    f1 = np.divide(2 * tp, denom, out=np.zeros(k), where=denom > 0)
    return float(f1.mean())


def binary_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    n1 = int(positive.sum())
    n0 = len(positive) - n1
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def per_class_auroc(preds: PredictionSet) -> dict[int, float]:
    """One-vs-rest AUROC per class; classes lacking positives or negatives are skipped."""
    out = {}
    skipped = []
    for c in range(preds.n_classes):
        pos = preds.labels == c
        if pos.all() or not pos.any():
            skipped.append(c)
            continue
        out[c] = binary_auroc(preds.probabilities[:, c], pos)
    if skipped and out:
        warnings.warn(f"AUROC undefined for classes {skipped} (single-sided labels); excluded", stacklevel=3)
    return out


def macro_auroc(preds: PredictionSet) -> float:
    per = per_class_auroc(preds)
    if not per:
        raise UndefinedMetricError("AUROC undefined for every class")
    return float(np.mean(list(per.values())))


def davies_bouldin(features: np.ndarray, labels: np.ndarray) -> float:
    """Davies-Bouldin index over the clusters given by ``labels``.

    Scatter is the mean Euclidean distance to the centroid; separation is the
    Euclidean centroid distance. Lower is better.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise UndefinedMetricError("Davies-Bouldin index needs at least 2 non-empty clusters")
    centroids = np.stack([x[labels == c].mean(axis=0) for c in clusters])
    scatter = np.array([np.linalg.norm(x[labels == c] - centroids[i], axis=1).mean()
                        for i, c in enumerate(clusters)])
    diff = centroids[:, None, :] - centroids[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    n = len(clusters)
    off = ~np.eye(n, dtype=bool)
    zero = np.argwhere((dist == 0) & off)
    if len(zero):
        i, j = zero[0]
        raise ZeroDivisionError(f"clusters {clusters[i]} and {clusters[j]} have coincident centroids")
    ratio = np.full((n, n), -np.inf)
    ratio[off] = ((scatter[:, None] + scatter[None, :])[off]) / dist[off]
    return float(ratio.max(axis=1).mean())


@dataclass
class SubjectRow:
    subject_id: int
    n_samples: int
    accuracy: float
    f1: float
    auroc: Optional[float]


@dataclass
class EvalReport:
    rows: list[SubjectRow]
    accuracy: float
    f1: float
    auroc: Optional[float]
    dbi: Optional[float] = None
    split: str = "test"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "summary": {"accuracy": self.accuracy, "f1": self.f1, "auroc": self.auroc, "dbi": self.dbi,
                        "n_subjects": len(self.rows)},
            "subjects": [vars(r) for r in self.rows],
            **self.extra,
        }


def aggregate_per_subject(preds: PredictionSet) -> EvalReport:
    """Metrics within each subject, then an unweighted mean across subjects.

    Subjects whose samples cover fewer than 2 classes get no AUROC and are
    left out of the AUROC mean.
    """
    if preds.subject_ids is None:
        raise ValueError("per-subject aggregation needs subject ids")
    rows = []
    for sid in np.unique(preds.subject_ids):
        part = preds.subset(preds.subject_ids == sid)
        if len(np.unique(part.labels)) < 2:
            warnings.warn(f"subject {sid}: fewer than 2 classes present, AUROC skipped", stacklevel=2)
            auc = None
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                auc = macro_auroc(part)
        rows.append(SubjectRow(int(sid), len(part.labels), accuracy(part), macro_f1(part), auc))
    aucs = [r.auroc for r in rows if r.auroc is not None]
    return EvalReport(
        rows=rows,
        accuracy=float(np.mean([r.accuracy for r in rows])),
        f1=float(np.mean([r.f1 for r in rows])),
        auroc=float(np.mean(aucs)) if aucs else None,
    )


def pca_components(features: np.ndarray, dims: int = 2, tol: float = 1e-7,
                   max_iter: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Top principal directions by power iteration with deflation.

    Works on the centered data matrix directly (never forms the F x F
    covariance). Returns ``(components (dims, F), variances (dims,))``.
    Directions beyond the data's rank come back as zero vectors with zero
    variance. Each direction's largest-magnitude coordinate is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("PCA needs an (N, F) matrix with N >= 3")
    x = x - x.mean(axis=0)
    n, f = x.shape
    comps = np.zeros((dims, f))
    variances = np.zeros(dims)
    floor = 1e-10 * float((x * x).sum()) / (n - 1)
    rng = np.random.default_rng(0)
    for k in range(dims):
        prev = comps[:k]
        v = rng.standard_normal(f)
        v -= prev.T @ (prev @ v)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = x.T @ (x @ v) / (n - 1)
            w -= prev.T @ (prev @ w)
            lam = float(v @ w)
            size = np.linalg.norm(w)
            if size <= floor:
                lam = 0.0
                break
            w /= size
            converged = np.linalg.norm(w - v) < tol
            v = w
            if converged:
                break
        if lam <= floor:
            warnings.warn(f"data rank < {dims}; principal component {k + 1} onward filled with zeros",
                          stacklevel=2)
            break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps[k] = v
        variances[k] = lam
    return comps, variances


def pca_project(features: np.ndarray, dims: int = 2) -> np.ndarray:
    """Project mean-centered ``features`` onto the top ``dims`` principal directions."""
    comps, _ = pca_components(features, dims)
    x = np.asarray(features, dtype=np.float64)
    return (x - x.mean(axis=0)) @ comps.T
