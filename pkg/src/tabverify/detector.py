"""Detecting insufficient retrieved evidence.

Given a trained model's output for one claim, two scores predict whether the
gold table is actually among the retrieved candidates:

* ternary max-relevance: the largest per-table (1 - p(irrelevant)); high
  values mean some table looks usable, so "suitable iff score >= threshold";
* reranking entropy: the entropy of the joint head's table marginal; high
  values mean the model cannot pick a table, so "suitable iff score <=
  threshold".

Sweeping the threshold over the observed scores yields a precision-recall
curve for the positive class "gold table present" (a documented flag flips
the class). Each curve carries the most-frequent-class baseline precision,
which equals the positive-class prevalence.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from tabverify.heads import IRRELEVANT, TernaryDistribution


class Method(str, Enum):
    """Which model quantity produced a suitability score."""

    TERNARY_MAX_RELEVANCE = "ternary_max_relevance"
    JOINT_ENTROPY = "joint_entropy"


@dataclass(frozen=True)
class SuitabilityScore:
    """One claim's evidence-sufficiency score and the method that made it."""

    claim_id: str
    score: float
    method: Method


def ternary_suitability(dist: TernaryDistribution) -> float:
    """max over tables of (1 - p(irrelevant)); in [0, 1], higher = suitable."""
    return float((1.0 - dist.probs[:, IRRELEVANT]).max())


def joint_entropy(p_s) -> float:
    """Shannon entropy of the reranking masses, with 0 * ln 0 = 0.

    Bounded by [0, ln k]; higher entropy means the model is less sure any
    retrieved table is the right one.
    """
    p = np.asarray(p_s, dtype=np.float64)
    if p.ndim != 1 or len(p) < 1:
        raise ValueError("expected a flat vector of reranking masses")
    if p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("reranking masses must form a distribution")
    nonzero = p[p > 0.0]
    return float(-(nonzero * np.log(nonzero)).sum())


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True)
class PrCurve:
    """Threshold sweep results plus the prevalence baseline."""

    points: tuple[PrPoint, ...]
    baseline_precision: float
    method: Method
    positive_is_gold_present: bool


def pr_curve(
    scores: list[tuple[SuitabilityScore, bool]],
    positive_is_gold_present: bool = True,
) -> PrCurve:
    """Precision-recall over every distinct score threshold.

    ``scores`` pairs each claim's score with whether the gold table was in
    its retrieved set. Ties share one threshold step. Points are ordered by
    increasing recall.
    """
    if not scores:
        raise ValueError("cannot build a PR curve from no scores")
    methods = {s.method for s, _ in scores}
    if len(methods) != 1:
        raise ValueError(f"scores mix methods: {sorted(m.value for m in methods)}")
    method = methods.pop()

    labels = np.array(
        [present == positive_is_gold_present for _, present in scores], dtype=bool
    )
    raw = np.array([s.score for s, _ in scores], dtype=np.float64)
    # Orient so that "predict positive" is always score >= threshold.
    oriented = raw if method is Method.TERNARY_MAX_RELEVANCE else -raw

    n_positive = int(labels.sum())
    if n_positive == 0:
        raise ValueError("no positive examples; recall is undefined")

    points = []
    for cut in np.unique(oriented)[::-1]:
        predicted = oriented >= cut
        tp = int((predicted & labels).sum())
        precision = tp / int(predicted.sum())
        recall = tp / n_positive
        threshold = float(cut if method is Method.TERNARY_MAX_RELEVANCE else -cut)
        points.append(PrPoint(threshold=threshold, precision=precision, recall=recall))

    return PrCurve(
        points=tuple(points),
        baseline_precision=n_positive / len(labels),
        method=method,
        positive_is_gold_present=positive_is_gold_present,
    )


def best_f1_point(curve: PrCurve) -> PrPoint:
    """The operating point maximizing F1; ties resolve to higher recall."""
    best: PrPoint | None = None
    best_f1 = -1.0
    for point in curve.points:
        if point.precision + point.recall == 0.0:
            continue
        f1 = 2 * point.precision * point.recall / (point.precision + point.recall)
        if f1 > best_f1 or (f1 == best_f1 and best and point.recall > best.recall):
            best_f1 = f1
            best = point
    assert best is not None
    return best


def curve_to_csv(curve: PrCurve) -> str:
    """Render a curve as ``threshold,precision,recall`` CSV text."""
    lines = ["threshold,precision,recall"]
    lines.extend(
        f"{p.threshold!r},{p.precision!r},{p.recall!r}" for p in curve.points
    )
    return "\n".join(lines) + "\n"
