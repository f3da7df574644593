"""Multi-label evaluation: per-class AP, support-weighted aggregates, accuracy.

AP is the step-wise area under the precision-recall curve over the ranked
list (no interpolation), with score ties broken by stable original order.
Classes without a single positive label are undefined and excluded from the
weighted mean rather than counted as zero. P/R/F1 binarize at a sigmoid
threshold and average per-class values weighted by class support.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError


@dataclass
class MetricsReport:
    class_names: list
    per_class_ap: list  # float or None for undefined classes
    supports: list
    weighted_map: float
    p_w: float
    r_w: float
    f1_w: float
    accuracy: float = None  # only for single-label sets

    def to_dict(self):
        return {
            "classes": [
                {
                    "name": n,
                    "ap": None if ap is None else float(ap),
                    "support": int(s),
                }
                for n, ap, s in zip(self.class_names, self.per_class_ap, self.supports)
            ],
            "weighted_map": float(self.weighted_map),
            "p_w": float(self.p_w),
            "r_w": float(self.r_w),
            "f1_w": float(self.f1_w),
            "accuracy": None if self.accuracy is None else float(self.accuracy),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def render_table(self):
        """Aligned text table: one column per class plus the aggregates."""
        headers = [""] + list(self.class_names) + ["F1_w", "mAP", "P_w", "R_w"]
        support_row = ["Support"] + [str(int(s)) for s in self.supports] + ["-"] * 4
        ap_row = ["AP"] + ["-" if ap is None else f"{ap:.3f}" for ap in self.per_class_ap]
        ap_row += [f"{self.f1_w:.3f}", f"{self.weighted_map:.3f}", f"{self.p_w:.3f}", f"{self.r_w:.3f}"]
        if self.accuracy is not None:
            headers.append("Acc")
            support_row.append("-")
            ap_row.append(f"{self.accuracy:.3f}")
        rows = [headers, support_row, ap_row]
        widths = [max(len(r[c]) for r in rows) for c in range(len(headers))]
        return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows)


def average_precision(scores, labels):
    """Step-wise AP of one class; None when the class has no positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} must be equal 1-D")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    tp = np.cumsum(ranked)
    k = np.arange(1, len(ranked) + 1)
    precision_at_hit = (tp / k)[ranked == 1]
    return float(precision_at_hit.sum() / n_pos)


def weighted_map(per_class_ap, supports):
    """Support-weighted mean AP over classes with defined AP and support > 0."""
    total = 0.0
    weight = 0.0
    for ap, s in zip(per_class_ap, supports):
        if ap is None or s <= 0:
            continue
        total += s * ap
        weight += s
    if weight == 0:
        raise ContractError("weighted mAP undefined: no class has positive labels")
    return total / weight


def weighted_prf(scores, labels, threshold=0.5):
    """Support-weighted precision/recall/F1 from sigmoid-binarized scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    preds = expit(scores) >= threshold
    supports = labels.sum(axis=0)
    p_sum = r_sum = f_sum = 0.0
    weight = supports.sum()
    if weight == 0:
        raise ContractError("weighted P/R/F1 undefined: no positive labels")
    for c in range(labels.shape[1]):
        s = supports[c]
        if s == 0:
            continue
        tp = float(np.sum(preds[:, c] & (labels[:, c] == 1)))
        pp = float(preds[:, c].sum())
        prec = tp / pp if pp > 0 else 0.0
        rec = tp / s
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        p_sum += s * prec
        r_sum += s * rec
        f_sum += s * f1
    return p_sum / weight, r_sum / weight, f_sum / weight


def top1_accuracy(scores, single_labels):
    """Fraction of samples whose argmax score hits the true class.

    Ties resolve to the lowest class index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    single_labels = np.asarray(single_labels)
    return float(np.mean(np.argmax(scores, axis=1) == single_labels))


def metrics_report(scores, labels, class_names, threshold=0.5):
    """Full MetricsReport for a score matrix vs multi-hot labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} != labels {labels.shape}")
    aps = [average_precision(scores[:, c], labels[:, c]) for c in range(labels.shape[1])]
    supports = labels.sum(axis=0).astype(int).tolist()
    p_w, r_w, f1_w = weighted_prf(scores, labels, threshold)
    acc = None
    if np.all(labels.sum(axis=1) == 1):
        acc = top1_accuracy(scores, np.argmax(labels, axis=1))
    return MetricsReport(
        class_names=list(class_names),
        per_class_ap=aps,
        supports=supports,
        weighted_map=weighted_map(aps, supports),
        p_w=p_w,
        r_w=r_w,
        f1_w=f1_w,
        accuracy=acc,
    )
