"""Confusion matrices, F1/accuracy metrics and the modality ablation table."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["ConfusionMatrix", "MetricsReport", "confusion_matrix", "compute_metrics",
           "ABLATION_SUBSETS", "AblationRow", "run_ablation", "write_ablation_csv"]


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (true, predicted)

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricsReport:
    per_class_f1: np.ndarray
    weighted_f1: float
    macro_f1: float
    accuracy: float
    balanced_accuracy: float

    @property
    def acc(self) -> float:
        """Mean per-class recall, reported as "Acc"."""
        return self.balanced_accuracy


def confusion_matrix(y_true, y_pred, K: int) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError("y_true and y_pred lengths differ")
    for name, arr in (("y_true", t), ("y_pred", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise ValueError(f"{name} has labels outside 0..{K - 1}")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def compute_metrics(cm: ConfusionMatrix | np.ndarray) -> MetricsReport:
    counts = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if counts.shape[0] < 2:
        raise ValueError("need at least two classes")
    n = counts.sum()
    if n == 0:
        raise ValueError("no samples")
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    return MetricsReport(
        per_class_f1=f1,
        weighted_f1=float((support / n) @ f1),
        macro_f1=float(f1.mean()),
        accuracy=float(tp.sum() / n),
        balanced_accuracy=float(recall.mean()),
    )


ABLATION_SUBSETS = (
    ("cell", (1, 0, 0)),
    ("tissue", (0, 1, 0)),
    ("edge", (0, 0, 1)),
    ("cell+tissue", (1, 1, 0)),
    ("cell+edge", (1, 0, 1)),
    ("tissue+edge", (0, 1, 1)),
    ("fusion", (1, 1, 1)),
)


@dataclass(frozen=True)
class AblationRow:
    subset: str
    metrics: MetricsReport
    predictions: np.ndarray


def run_ablation(train, test, normalizer, svm_params: dict | None = None, K: int | None = None):
    """One SVM ensemble per modality subset, unit weight on included blocks.

    ``train`` and ``test`` are ``(features, labels)`` with ``features`` a
    dict ``{"cell", "tissue", "edge"} -> matrix``.
    """
    from .fusion import FusionConfig, fuse
    from .svm import predict, train_multiclass

    svm_params = svm_params or {}
    (tr_feats, tr_y), (te_feats, te_y) = train, test
    for split in (tr_feats, te_feats):
        for modality in ("cell", "tissue", "edge"):
            if modality not in split:
                raise KeyError(f"missing features for modality {modality!r}")
    K = int(max(np.max(tr_y), np.max(te_y))) + 1 if K is None else K
    rows = []
    for name, (a, b, g) in ABLATION_SUBSETS:
        cfg = FusionConfig(a, b, g, normalizer)
        Xtr = fuse(tr_feats["cell"], tr_feats["tissue"], tr_feats["edge"], cfg)
        Xte = fuse(te_feats["cell"], te_feats["tissue"], te_feats["edge"], cfg)
        ens = train_multiclass(Xtr, tr_y, K=K, **svm_params)
        pred, _ = predict(ens, Xte)
        rows.append(AblationRow(name, compute_metrics(confusion_matrix(te_y, pred, K)), pred))
    return rows


def write_ablation_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset", "acc", "balanced_acc", "macro_f1", "weighted_f1"])
        for r in rows:
            m = r.metrics
            w.writerow([r.subset, f"{m.accuracy:.6f}", f"{m.balanced_accuracy:.6f}",
                        f"{m.macro_f1:.6f}", f"{m.weighted_f1:.6f}"])
    return path
