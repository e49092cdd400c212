"""Bag-level classification metrics: accuracy, macro-F1, ROC-AUC and PR-AUC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def binary_roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg), ties counted half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0.5
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Sum over distinct score thresholds (descending) of recall increment times
    precision at that threshold.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = (np.asarray(labels).ravel() > 0.5).astype(float)
    n_pos = y.sum()
    if n_pos == 0:
        raise ValueError("PR-AUC needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _per_class(fn, scores, labels):
    s, y = _as_2d(scores), _as_2d(labels)
    values, excluded = {}, []
    for c in range(s.shape[1]):
        try:
            values[c] = fn(s[:, c], y[:, c])
        except ValueError:
            excluded.append(c)
    return values, excluded


def roc_auc(scores, labels) -> float:
    """Macro ROC-AUC over classes that have both positives and negatives."""
    values, _ = _per_class(binary_roc_auc, scores, labels)
    if not values:
        raise ValueError("no class has both positives and negatives")
    return float(np.mean(list(values.values())))


def pr_auc(scores, labels) -> float:
    """Macro average precision over classes with at least one positive."""
    values, _ = _per_class(binary_average_precision, scores, labels)
    if not values:
        raise ValueError("no class has a positive sample")
    return float(np.mean(list(values.values())))


def predictions(scores, task_mode: str) -> np.ndarray:
    s = _as_2d(scores)
    if task_mode == "multiclass":
        pred = np.zeros_like(s)
        pred[np.arange(s.shape[0]), s.argmax(axis=1)] = 1.0
        return pred
    return (s >= 0.5).astype(float)


def confusion(pred, labels) -> dict:
    p, y = _as_2d(pred) > 0.5, _as_2d(labels) > 0.5
    return {"tp": (p & y).sum(0).astype(int), "fp": (p & ~y).sum(0).astype(int),
            "fn": (~p & y).sum(0).astype(int), "tn": (~p & ~y).sum(0).astype(int)}


def f1_per_class(pred, labels) -> np.ndarray:
    cm = confusion(pred, labels)
    tp, fp, fn = cm["tp"], cm["fp"], cm["fn"]
    denom = 2 * tp + fp + fn
    # a class never predicted and never present is perfectly matched
    return np.where(denom == 0, 1.0, 2 * tp / np.maximum(denom, 1))


def acc_f1(scores, labels, task_mode: str = "multilabel") -> tuple[float, float]:
    """Multilabel: subset accuracy at 0.5; multiclass: argmax accuracy. F1 is macro."""
    y = _as_2d(labels)
    if y.shape[0] == 0:
        raise ValueError("no samples")
    pred = predictions(scores, task_mode)
    if task_mode == "multiclass":
        acc = float(np.mean(pred.argmax(1) == y.argmax(1)))
    else:
        acc = float(np.mean(np.all(pred == (y > 0.5), axis=1)))
    return acc, float(np.mean(f1_per_class(pred, y)))


@dataclass
class MetricsReport:
    acc: float
    f1: float
    roc_auc: float
    pr_auc: float
    n: int
    per_class: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"acc": self.acc, "f1": self.f1, "roc_auc": self.roc_auc, "pr_auc": self.pr_auc,
                "n": self.n, "per_class": self.per_class, "excluded": self.excluded}

    def to_text(self) -> str:
        lines = [f"n={self.n}  acc={self.acc:.4f}  f1={self.f1:.4f}  "
                 f"roc_auc={self.roc_auc:.4f}  pr_auc={self.pr_auc:.4f}",
                 f"{'class':<12}{'f1':>8}{'roc_auc':>9}{'pr_auc':>8}{'tp':>5}{'fp':>5}{'fn':>5}{'tn':>5}"]
        for name, row in self.per_class.items():
            fmt = lambda v: f"{v:.4f}" if v is not None else "  n/a "
            lines.append(f"{name:<12}{fmt(row['f1']):>8}{fmt(row['roc_auc']):>9}{fmt(row['pr_auc']):>8}"
                         f"{row['tp']:>5}{row['fp']:>5}{row['fn']:>5}{row['tn']:>5}")
        return "\n".join(lines)


def evaluate_scores(scores, labels, task_mode: str = "multilabel",
                    class_names=None) -> MetricsReport:
    s, y = _as_2d(scores), _as_2d(labels)
    acc, f1 = acc_f1(s, y, task_mode)
    roc, roc_excl = _per_class(binary_roc_auc, s, y)
    ap, ap_excl = _per_class(binary_average_precision, s, y)
    pred = predictions(s, task_mode)
    cm = confusion(pred, y)
    f1s = f1_per_class(pred, y)
    names = list(class_names) if class_names else [f"class{c}" for c in range(s.shape[1])]
    per_class = {
        names[c]: {"f1": float(f1s[c]), "roc_auc": roc.get(c), "pr_auc": ap.get(c),
                   **{k: int(v[c]) for k, v in cm.items()}}
        for c in range(s.shape[1])
    }
    return MetricsReport(
        acc, f1,
        float(np.mean(list(roc.values()))) if roc else float("nan"),
        float(np.mean(list(ap.values()))) if ap else float("nan"),
        int(s.shape[0]), per_class,
        {"roc_auc": [names[c] for c in roc_excl], "pr_auc": [names[c] for c in ap_excl]},
    )
