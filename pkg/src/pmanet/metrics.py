"""Classification metrics: confusion-derived scores, rank-statistic AUC and ROC."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import EmptyInput


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    fpr: float
    tp: int
    fp: int
    tn: int
    fn: int
    degenerate: dict[str, bool] = field(default_factory=dict)
    per_class: dict[str, dict] | None = None

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["per_class"] is None:
            del d["per_class"]
        return d


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.size == 0:
        raise EmptyInput("no samples to score")
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    return s, y


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [values.size]])
    for start, end in zip(starts, ends):
        ranks[order[start:end]] = (start + 1 + end) / 2.0
    return ranks


def rank_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half.

    Returns NaN when either class is absent.
    """
    s, y = _as_arrays(scores, labels)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = average_ranks(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _ratio(num: int, den: int, name: str, flags: dict) -> float:
    if den == 0:
        flags[name] = True
        return 0.0
    return num / den


def from_confusion(tp: int, fp: int, tn: int, fn: int, auc: float = float("nan")) -> Metrics:
    flags: dict[str, bool] = {}
    total = tp + fp + tn + fn
    accuracy = _ratio(tp + tn, total, "accuracy", flags)
    precision = _ratio(tp, tp + fp, "precision", flags)
    recall = _ratio(tp, tp + fn, "recall", flags)
    fpr = _ratio(fp, fp + tn, "fpr", flags)
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags["f1"] = True
    if np.isnan(auc):
        flags["auc"] = True
        auc = 0.0
    return Metrics(accuracy, precision, recall, f1, float(auc), fpr, tp, fp, tn, fn, flags)


def compute_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    """Binary metrics; ``scores`` are malicious-class probabilities and a
    sample is flagged malicious when its score is >= ``threshold``."""
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return from_confusion(tp, fp, tn, fn, rank_auc(s, y))


def compute_multiclass_metrics(probabilities, labels, class_names=None) -> Metrics:
    """One-vs-rest metrics per class plus their macro average.

    Per class, a sample counts as predicted positive when that class wins the
    argmax. Top-level accuracy is plain multi-class accuracy; the confusion
    counts at top level are the sums over classes.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if p.size == 0:
        raise EmptyInput("no samples to score")
    k = p.shape[1]
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    pred = p.argmax(axis=1)
    per_class = {}
    for c in range(k):
        is_c, pred_c = y == c, pred == c
        tp, fp = int(np.sum(pred_c & is_c)), int(np.sum(pred_c & ~is_c))
        tn, fn = int(np.sum(~pred_c & ~is_c)), int(np.sum(~pred_c & is_c))
        per_class[names[c]] = from_confusion(tp, fp, tn, fn, rank_auc(p[:, c], is_c.astype(int))).to_dict()
    keys = ("precision", "recall", "f1", "auc", "fpr")
    macro = {key: float(np.mean([per_class[n][key] for n in names])) for key in keys}
    totals = {key: sum(per_class[n][key] for n in names) for key in ("tp", "fp", "tn", "fn")}
    flags = {n: True for n in names if per_class[n]["degenerate"]}
    return Metrics(
        accuracy=float(np.mean(pred == y)), **macro, **totals, degenerate=flags, per_class=per_class
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def area(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))

    def tpr_at_fpr(self, target: float) -> float:
        """TPR at ``target`` FPR, linearly interpolated between curve points;
        at a vertical step the highest TPR reached at that FPR is used."""
        if not 0.0 <= target <= 1.0:
            raise ValueError(f"fpr must lie in [0, 1], got {target}")
        fpr, tpr = self.fpr, self.tpr
        at_or_below = np.flatnonzero(fpr <= target)
        i = at_or_below[-1]
        if fpr[i] == target or i == fpr.size - 1:
            return float(tpr[fpr == fpr[i]].max())
        j = i + 1
        frac = (target - fpr[i]) / (fpr[j] - fpr[i])
        return float(tpr[i] + frac * (tpr[j] - tpr[i]))

    def to_csv(self) -> str:
        lines = ["fpr,tpr"] + [f"{f:.10g},{t:.10g}" for f, t in zip(self.fpr, self.tpr)]
        return "\n".join(lines) + "\n"


def roc_points(scores, labels) -> RocCurve:
    """ROC staircase from (0, 0) to (1, 1), one point per distinct score."""
    s, y = _as_arrays(scores, labels)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise EmptyInput("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, pos_sorted = s[order], pos[order]
    last_of_group = np.concatenate([np.flatnonzero(np.diff(s_sorted)), [s.size - 1]])
    tps = np.cumsum(pos_sorted)[last_of_group]
    fps = (last_of_group + 1) - tps
    fpr = np.concatenate([[0.0], fps / n_neg])
    tpr = np.concatenate([[0.0], tps / n_pos])
    thresholds = np.concatenate([[np.inf], s_sorted[last_of_group]])
    return RocCurve(fpr, tpr, thresholds)


def tpr_at_fpr(scores, labels, target: float) -> float:
    return roc_points(scores, labels).tpr_at_fpr(target)
