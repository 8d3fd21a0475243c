"""Multi-label ranking metrics: Hamming Loss, One Error, Coverage, Ranking Loss, Average Precision.

Ranks are 1-based by descending score, ties broken by ascending label index.
Ranking Loss counts a (true, false) pair as mis-ordered when the true label's
score is ``<=`` the false one's, so ties are penalised.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

METRICS = ("hamming_loss", "one_error", "coverage", "ranking_loss", "average_precision")


class MetricDomainError(ValueError):
    """An instance violates a metric's precondition (e.g. an empty true label set)."""


@dataclass
class EvalInstance:
    scores: np.ndarray
    true_set: np.ndarray
    pred_set: Optional[np.ndarray] = None


@dataclass
class EvalBatch:
    """Row-aligned ``(m, q)`` arrays: scores, true bits, predicted bits."""

    scores: np.ndarray
    true: np.ndarray
    pred: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.true = np.atleast_2d(np.asarray(self.true)).astype(bool)
        if self.pred is not None:
            self.pred = np.atleast_2d(np.asarray(self.pred)).astype(bool)
            if self.pred.shape != self.true.shape:
                raise ValueError(f"pred {self.pred.shape} and true {self.true.shape} differ")
        if self.scores.shape != self.true.shape:
            raise ValueError(f"scores {self.scores.shape} and true {self.true.shape} differ")

    @classmethod
    def from_instances(cls, batch: Sequence[EvalInstance]) -> "EvalBatch":
        if not batch:
            return cls(np.zeros((0, 0)), np.zeros((0, 0)))
        preds = [b.pred_set for b in batch]
        pred = None if any(p is None for p in preds) else np.stack(preds)
        return cls(np.stack([b.scores for b in batch]), np.stack([b.true_set for b in batch]), pred)

    @property
    def m(self) -> int:
        return self.scores.shape[0]

    def subset(self, mask: np.ndarray) -> "EvalBatch":
        return EvalBatch(self.scores[mask], self.true[mask], None if self.pred is None else self.pred[mask])


BatchLike = Union[EvalBatch, Sequence[EvalInstance]]


def _batch(batch: BatchLike) -> EvalBatch:
    b = batch if isinstance(batch, EvalBatch) else EvalBatch.from_instances(batch)
    if b.m == 0:
        raise MetricDomainError("metric needs a non-empty batch")
    return b


def _need_true(b: EvalBatch, metric: str) -> None:
    empty = np.flatnonzero(~b.true.any(axis=1))
    if empty.size:
        raise MetricDomainError(f"{metric}: instances {empty.tolist()} have no true label")


def ranks(scores: np.ndarray) -> np.ndarray:
    """1-based rank of every label per row."""
    scores = np.atleast_2d(scores)
    # stable sort on -score keeps ascending label index among ties
    order = np.argsort(-scores, axis=1, kind="stable")
    r = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    r[rows, order] = np.arange(1, scores.shape[1] + 1)[None, :]
    return r


def hamming_loss(batch: BatchLike) -> float:
    b = _batch(batch)
    if b.pred is None:
        raise MetricDomainError("hamming_loss needs predicted label sets")
    return float((b.pred != b.true).mean())


def one_error(batch: BatchLike) -> float:
    b = _batch(batch)
    _need_true(b, "one_error")
    top = np.argsort(-b.scores, axis=1, kind="stable")[:, 0]
    return float(np.mean(~b.true[np.arange(b.m), top]))


def coverage(batch: BatchLike) -> float:
    b = _batch(batch)
    _need_true(b, "coverage")
    r = ranks(b.scores)
    return float(np.mean(np.where(b.true, r, 0).max(axis=1) - 1))


def ranking_loss(batch: BatchLike) -> float:
    b = _batch(batch)
    _need_true(b, "ranking_loss")
    full = np.flatnonzero(b.true.all(axis=1))
    if full.size:
        raise MetricDomainError(f"ranking_loss: instances {full.tolist()} have every label true")
    s = b.scores
    reversed_pair = s[:, :, None] <= s[:, None, :]
    pairs = b.true[:, :, None] & ~b.true[:, None, :]
    counts = (reversed_pair & pairs).sum(axis=(1, 2))
    sizes = b.true.sum(axis=1) * (~b.true).sum(axis=1)
    return float(np.mean(counts / sizes))


def average_precision(batch: BatchLike) -> float:
    b = _batch(batch)
    _need_true(b, "average_precision")
    r = ranks(b.scores)
    # above[i, j, l]: label l is true and ranked at or above label j
    above = (r[:, None, :] <= r[:, :, None]) & b.true[:, None, :]
    precision = above.sum(axis=2) / r
    per = np.where(b.true, precision, 0.0).sum(axis=1) / b.true.sum(axis=1)
    return float(np.mean(per))


_EVALUATORS = {
    "hamming_loss": hamming_loss,
    "one_error": one_error,
    "coverage": coverage,
    "ranking_loss": ranking_loss,
    "average_precision": average_precision,
}


def usable_mask(b: EvalBatch, metric: str) -> np.ndarray:
    """Instances satisfying ``metric``'s precondition."""
    if metric == "hamming_loss":
        return np.full(b.m, b.pred is not None)
    has_true = b.true.any(axis=1)
    if metric == "ranking_loss":
        return has_true & ~b.true.all(axis=1)
    return has_true


@dataclass
class MetricRow:
    metric: str
    value: float
    instances_used: int
    instances_skipped: int


def metric_report(batch: BatchLike) -> list[MetricRow]:
    """All five metrics, skipping (and counting) instances a metric cannot score."""
    b = _batch(batch)
    rows = []
    for name in METRICS:
        mask = usable_mask(b, name)
        used = int(mask.sum())
        value = _EVALUATORS[name](b.subset(mask)) if used else float("nan")
        rows.append(MetricRow(name, value, used, b.m - used))
    return rows


def report_csv(rows: Sequence[MetricRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["metric", "value", "instances_used", "instances_skipped"])
    for r in rows:
        w.writerow([r.metric, repr(r.value), r.instances_used, r.instances_skipped])
    return out.getvalue()


def report_table(rows: Sequence[MetricRow]) -> str:
    lines = [f"{'metric':<18} {'value':>10} {'used':>6} {'skipped':>8}"]
    for r in rows:
        lines.append(f"{r.metric:<18} {r.value:>10.4f} {r.instances_used:>6d} {r.instances_skipped:>8d}")
    return "\n".join(lines)


# ------------------------------------------------------------------ oracle


def oracle_metrics(batch: BatchLike) -> dict[str, float]:
    """Brute-force reference: literal per-instance formulas in plain Python.

    Shares nothing with the vectorised code above beyond input conversion; meant
    for small batches (q <= 10, m <= 1000) in tests. Hamming Loss is present only
    when predictions are given, Ranking Loss only when no instance has every
    label true.
    """
    b = _batch(batch)
    m, q = b.scores.shape
    if q > 10 or m > 1000:
        raise ValueError(f"oracle is limited to q <= 10 and m <= 1000, got q={q}, m={m}")
    scores = b.scores.tolist()
    truth = [{j for j in range(q) if b.true[i, j]} for i in range(m)]
    for i, y in enumerate(truth):
        if not y:
            raise MetricDomainError(f"oracle: instance {i} has no true label")
    out: dict[str, float] = {}

    if b.pred is not None:
        predicted = [{j for j in range(q) if b.pred[i, j]} for i in range(m)]
        out["hamming_loss"] = sum(len(predicted[i] ^ truth[i]) / q for i in range(m)) / m

    def rank_of(i: int) -> dict[int, int]:
        ordered = sorted(range(q), key=lambda j: (-scores[i][j], j))
        return {label: pos + 1 for pos, label in enumerate(ordered)}

    oe = cov = ap = 0.0
    rl_terms = []
    rl_defined = True
    for i in range(m):
        rank = rank_of(i)
        top = min(range(q), key=lambda j: rank[j])
        oe += top not in truth[i]
        cov += max(rank[j] for j in truth[i]) - 1
        total = 0.0
        for j in truth[i]:
            total += sum(1 for l in truth[i] if rank[l] <= rank[j]) / rank[j]
        ap += total / len(truth[i])
        complement = set(range(q)) - truth[i]
        if complement:
            bad = sum(1 for j in truth[i] for l in complement if scores[i][j] <= scores[i][l])
            rl_terms.append(bad / (len(truth[i]) * len(complement)))
        else:
            rl_defined = False
    out["one_error"] = oe / m
    out["coverage"] = cov / m
    if rl_defined:
        out["ranking_loss"] = sum(rl_terms) / m
    out["average_precision"] = ap / m
    return out
