"""Segmentation scores: confusion matrix, Dice, precision/recall/F1, ROC/AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .volume import LabelVolume, PathLike, VolumeError


def _arrays(pred, truth):
    p = pred.data if hasattr(pred, "data") else np.asarray(pred)
    t = truth.data if hasattr(truth, "data") else np.asarray(truth)
    if p.shape != t.shape:
        raise VolumeError(f"dims mismatch: prediction {p.shape} vs truth {t.shape}")
    return p, t


def confusion(pred, truth, n_classes: Optional[int] = None) -> np.ndarray:
    """``cm[i, j]`` = voxels with truth ``i`` predicted ``j``."""
    p, t = _arrays(pred, truth)
    if n_classes is None:
        n_classes = max(getattr(pred, "n_classes", 0), getattr(truth, "n_classes", 0))
        if not n_classes:
            n_classes = int(max(p.max(initial=0), t.max(initial=0))) + 1
    p = p.ravel().astype(np.int64)
    t = t.ravel().astype(np.int64)
    if p.size and (p.max() >= n_classes or t.max() >= n_classes or min(p.min(), t.min()) < 0):
        raise VolumeError(f"labels outside [0, {n_classes})")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes
    )


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def dsc(pred, truth, c: int) -> float:
    p, t = _arrays(pred, truth)
    a = p == c
    b = t == c
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / denom


def dsc_from_confusion(cm: np.ndarray, c: int) -> float:
    tp = cm[c, c]
    denom = cm[c, :].sum() + cm[:, c].sum()
    return 1.0 if denom == 0 else float(2 * tp / denom)


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    absent: bool = False


def precision_recall_f1(cm: np.ndarray) -> Tuple[List[PRF], PRF]:
    """Per-class triples (one-vs-rest) and their unweighted mean."""
    cm = np.asarray(cm)
    out = []
    for c in range(cm.shape[0]):
        tp = float(cm[c, c])
        fp = float(cm[:, c].sum() - cm[c, c])
        fn = float(cm[c, :].sum() - cm[c, c])
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        out.append(PRF(p, r, f, absent=(tp + fp == 0 and tp + fn == 0)))
    macro = PRF(*(float(np.mean([getattr(x, k) for x in out])) for k in ("precision", "recall", "f1")))
    return out, macro


def roc_curve(scores, positive) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FPR, TPR and thresholds; one point per distinct score plus the
    ``+inf`` (nothing positive) and ``-inf`` (everything positive) sentinels.
    A sample is called positive when its score is >= the threshold."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(positive, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positives and negatives")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos, 1.0]
    fpr = np.r_[0.0, fp / n_neg, 1.0]
    thr = np.r_[np.inf, s[last], -np.inf]
    return fpr, tpr, thr


def auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    """Trapezoidal area under a monotone ROC curve."""
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(scores, truth, c: int):
    """One-vs-rest ROC for class ``c``; ``(None, None)`` when undefined."""
    s, t = _arrays(scores, truth)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    pos = (t == c).ravel()
    if pos.all() or not pos.any():
        return None, None
    fpr, tpr, thr = roc_curve(s.ravel(), pos)
    return (fpr, tpr, thr), auc(fpr, tpr)


@dataclass
class MetricsReport:
    n_classes: int
    confusion: np.ndarray
    dsc: List[float]
    prf: List[PRF]
    macro: PRF
    accuracy: float
    auc: List[Optional[float]] = field(default_factory=list)
    roc: Dict[int, tuple] = field(default_factory=dict)
    class_names: Optional[Dict[int, str]] = None

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.dsc))

    def rows(self):
        names = self.class_names or {}
        for c in range(self.n_classes):
            a = self.auc[c] if self.auc else None
            yield {
                "class": names.get(c, str(c)),
                "dsc": self.dsc[c],
                "precision": self.prf[c].precision,
                "recall": self.prf[c].recall,
                "f1": self.prf[c].f1,
                "auc": a,
            }
        aucs = [a for a in self.auc if a is not None]
        yield {
            "class": "aggregate",
            "dsc": self.mean_dsc,
            "precision": self.macro.precision,
            "recall": self.macro.recall,
            "f1": self.macro.f1,
            "auc": float(np.mean(aucs)) if aucs else None,
        }

    def to_csv(self, path: PathLike) -> None:
        cols = ["class", "dsc", "precision", "recall", "f1", "auc"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.rows():
                w.writerow([_fmt(row[k]) for k in cols])
            w.writerow(["accuracy", _fmt(self.accuracy), "", "", "", ""])

    def roc_to_csv(self, path: PathLike, c: int) -> None:
        fpr, tpr, thr = self.roc[c]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            for row in zip(fpr, tpr, thr):
                w.writerow([_fmt(x) for x in row])


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    return repr(float(x))


def evaluate(
    pred: LabelVolume,
    truth: LabelVolume,
    scores: Optional[Sequence] = None,
    n_classes: Optional[int] = None,
) -> MetricsReport:
    cm = confusion(pred, truth, n_classes)
    C = cm.shape[0]
    prf, macro = precision_recall_f1(cm)
    report = MetricsReport(
        n_classes=C,
        confusion=cm,
        dsc=[dsc(pred, truth, c) for c in range(C)],
        prf=prf,
        macro=macro,
        accuracy=accuracy(cm),
        class_names=getattr(truth, "class_map", None),
    )
    if scores is not None:
        for c in range(C):
            roc, a = roc_auc(scores[c], truth, c)
            report.auc.append(a)
            if roc is not None:
                report.roc[c] = roc
    return report
