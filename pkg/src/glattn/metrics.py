"""Multi-label evaluation: top-k and ranking metrics plus per-class mAP.

All tie handling is fixed once: rankings break score ties toward the lower
class index, and tied positive/negative pairs count one half in rank loss.
Rows with no positive label are excluded from the sample-ranked metrics and
reported in the exclusion count. Final reductions use math.fsum so results
are reproducible to the last bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalBatch:
    scores: np.ndarray  # (N, C) real scores
    labels: np.ndarray  # (N, C) of {0, 1}
    ks: tuple = (3, 5)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape:
            raise ValueError(
                f"EvalBatch: scores {self.scores.shape} vs labels {self.labels.shape}"
            )
        if self.scores.ndim != 2 or self.scores.shape[0] < 1:
            raise ValueError("EvalBatch: need a nonempty (N, C) batch")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("EvalBatch: labels must be 0/1")
        self.ks = tuple(int(k) for k in self.ks)
        if any(k < 1 for k in self.ks):
            raise ValueError("EvalBatch: k values must be positive")


@dataclass
class MetricsReport:
    at_k: dict = field(default_factory=dict)  # (metric, k) -> value
    one_error: float = 0.0
    coverage: float = 0.0
    rank_loss: float = 0.0
    mean_ap: float = 0.0
    excluded_rows: int = 0

    def rows(self):
        """Machine-readable `metric,k,value` rows (4 decimals)."""
        out = []
        for (metric, k), value in sorted(self.at_k.items()):
            out.append(f"{metric},{k},{value:.4f}")
        out.append(f"one_error,,{self.one_error:.4f}")
        out.append(f"coverage,,{self.coverage:.4f}")
        out.append(f"rank_loss,,{self.rank_loss:.4f}")
        out.append(f"mAP,,{self.mean_ap:.4f}")
        return out

    def text(self):
        lines = [f"{metric}@{k} = {value:.4f}" for (metric, k), value in sorted(self.at_k.items())]
        lines.append(f"one-error = {self.one_error:.4f}")
        lines.append(f"coverage = {self.coverage:.4f}")
        lines.append(f"rank-loss = {self.rank_loss:.4f}")
        lines.append(f"mAP = {self.mean_ap:.4f}")
        if self.excluded_rows:
            lines.append(f"excluded all-negative rows = {self.excluded_rows}")
        return "\n".join(lines)


def _ranking(scores):
    """Class indices in ranking order: descending score, ties to lower index."""
    return np.argsort(-scores, kind="stable")


def evaluate(batch):
    """Compute the full metric suite over a batch.

    Sample-ranked metrics (the @k family, one-error, coverage, rank loss)
    skip rows without a positive label; mAP is computed per class over all
    rows and averaged over classes that have at least one positive.
    """
    scores, labels = batch.scores, batch.labels
    n, c = scores.shape
    keep = labels.sum(axis=1) > 0
    excluded = int(n - keep.sum())
    if not keep.any():
        raise ValueError("evaluate: every row is all-negative")

    per_k = {k: {"P": [], "R": [], "F": [], "H": [], "A": []} for k in batch.ks}
    one_err = []
    coverage = []
    rank_loss = []
    for i in range(n):
        if not keep[i]:
            continue
        row = scores[i]
        y = labels[i]
        order = _ranking(row)
        pos = np.flatnonzero(y == 1)
        neg = np.flatnonzero(y == 0)

        for k in batch.ks:
            topk = order[: min(k, c)]
            hits = int(np.isin(topk, pos).sum())
            p_at = hits / k
            r_at = hits / len(pos)
            f_at = 0.0 if hits == 0 else 2 * p_at * r_at / (p_at + r_at)
            pred = np.zeros(c, dtype=np.uint8)
            pred[topk] = 1
            h_at = int((pred != y).sum()) / c
            union = len(set(topk.tolist()) | set(pos.tolist()))
            a_at = hits / union
            per_k[k]["P"].append(p_at)
            per_k[k]["R"].append(r_at)
            per_k[k]["F"].append(f_at)
            per_k[k]["H"].append(h_at)
            per_k[k]["A"].append(a_at)

        one_err.append(0.0 if y[order[0]] == 1 else 1.0)
        rank_of = np.empty(c, dtype=np.int64)
        rank_of[order] = np.arange(c)
        coverage.append(float(rank_of[pos].max()))
        if len(neg) == 0:
            rank_loss.append(0.0)
        else:
            wrong = 0.0
            for p in pos:
                wrong += float((row[p] < row[neg]).sum())
                wrong += 0.5 * float((row[p] == row[neg]).sum())
            rank_loss.append(wrong / (len(pos) * len(neg)))

    kept = len(one_err)
    report = MetricsReport(excluded_rows=excluded)
    for k in batch.ks:
        for metric, values in per_k[k].items():
            report.at_k[(metric, k)] = math.fsum(values) / kept
    report.one_error = math.fsum(one_err) / kept
    report.coverage = math.fsum(coverage) / kept
    report.rank_loss = math.fsum(rank_loss) / kept
    report.mean_ap = mean_average_precision(scores, labels)
    return report


def average_precision(scores, labels):
    """AP of one class: rank all samples by score (ties to lower sample index)."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ranked = np.asarray(labels)[order]
    hits = 0
    precisions = []
    for i, is_pos in enumerate(ranked, start=1):
        if is_pos:
            hits += 1
            precisions.append(hits / i)
    if not precisions:
        return None
    return math.fsum(precisions) / hits


def mean_average_precision(scores, labels):
    """Mean AP over classes that have at least one positive sample."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    aps = []
    for j in range(scores.shape[1]):
        ap = average_precision(scores[:, j], labels[:, j])
        if ap is not None:
            aps.append(ap)
    if not aps:
        raise ValueError("mean_average_precision: no class has a positive sample")
    return math.fsum(aps) / len(aps)


def margin_satisfaction(scores, labels, margin):
    """Fraction of rows whose minimum positive beats the maximum negative by > margin.

    Rows without both a positive and a negative class are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    satisfied = 0
    considered = 0
    for i in range(scores.shape[0]):
        pos = scores[i][labels[i] == 1]
        neg = scores[i][labels[i] == 0]
        if len(pos) == 0 or len(neg) == 0:
            continue
        considered += 1
        if pos.min() > neg.max() + margin:
            satisfied += 1
    if considered == 0:
        raise ValueError("margin_satisfaction: no row has both label kinds")
    return satisfied / considered
