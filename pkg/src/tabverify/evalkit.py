"""Measurement: retrieval Hits@k, verdict accuracy, gold-rank buckets,
reranking comparisons, the ablation harness, and attention summaries.

All aggregation here is pure post-processing over rankings and prediction
records; reports serialize to JSON and to CSV tables for external plotting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from tabverify.corpus import Claim, Corpus
from tabverify.retriever import CellIndex
from tabverify.trainer import (
    EvalReport,
    ModelConfig,
    PredictionRecord,
    TrainConfig,
    evaluate_checkpoint,
    train,
)


class Bucket(str, Enum):
    """Where the retriever placed a claim's gold table."""

    RANK_1 = "rank1"
    RANK_2_3 = "rank2_3"
    RANK_4_5 = "rank4_5"
    BEYOND = "beyond"


def gold_rank(ranking: Sequence[str], gold_id: str) -> int | None:
    """1-based rank of the gold table in a ranking, or None if absent."""
    try:
        return ranking.index(gold_id) + 1
    except ValueError:
        return None


def hits_at_k(
    claims: Iterable[Claim],
    rankings: Mapping[str, Sequence[str]],
    ks: Iterable[int],
) -> dict[int, float]:
    """Fraction of claims whose gold table ranks within the top k, per k."""
    ranks = []
    for claim in claims:
        if claim.gold_table_id is None:
            raise ValueError(f"claim {claim.id!r} has no gold table id")
        ranks.append(gold_rank(rankings[claim.id], claim.gold_table_id))
    if not ranks:
        raise ValueError("no claims to score")
    return {
        k: sum(1 for r in ranks if r is not None and r <= k) / len(ranks)
        for k in ks
    }


def bucket_of(rank: int | None) -> Bucket:
    if rank is None or rank > 5:
        return Bucket.BEYOND
    if rank == 1:
        return Bucket.RANK_1
    if rank <= 3:
        return Bucket.RANK_2_3
    return Bucket.RANK_4_5


def bucketize_by_gold_rank(
    claims: Iterable[Claim], rankings: Mapping[str, Sequence[str]]
) -> dict[str, Bucket]:
    """Assign each claim to exactly one gold-rank bucket."""
    out = {}
    for claim in claims:
        if claim.gold_table_id is None:
            raise ValueError(f"claim {claim.id!r} has no gold table id")
        out[claim.id] = bucket_of(gold_rank(rankings[claim.id], claim.gold_table_id))
    return out


@dataclass
class MetricsReport:
    """One evaluation's numbers: retrieval/reranking hits, accuracy, buckets."""

    hits_at: dict[int, float] = field(default_factory=dict)
    accuracy: float | None = None
    bucket_accuracy: dict[str, float] = field(default_factory=dict)
    bucket_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "hits_at": {str(k): v for k, v in sorted(self.hits_at.items())},
            "accuracy": self.accuracy,
            "bucket_accuracy": dict(sorted(self.bucket_accuracy.items())),
            "bucket_counts": dict(sorted(self.bucket_counts.items())),
        }


def accuracy_by_bucket(
    records: Iterable[PredictionRecord],
) -> tuple[dict[str, float], dict[str, int]]:
    """Verdict accuracy split by the retriever's gold-rank bucket.

    Records must carry ``gold_rank`` (evaluate with full-corpus ranking on).
    """
    correct: dict[str, int] = {}
    counts: dict[str, int] = {}
    for record in records:
        if record.correct is None:
            continue
        bucket = bucket_of(record.gold_rank).value
        counts[bucket] = counts.get(bucket, 0) + 1
        correct[bucket] = correct.get(bucket, 0) + int(record.correct)
    return (
        {b: correct[b] / counts[b] for b in counts},
        counts,
    )


def report_from_eval(report: EvalReport, with_buckets: bool = True) -> MetricsReport:
    """Fold an inference report into the common metrics shape."""
    bucket_acc: dict[str, float] = {}
    bucket_counts: dict[str, int] = {}
    if with_buckets and any(r.gold_rank is not None for r in report.records):
        bucket_acc, bucket_counts = accuracy_by_bucket(report.records)
    return MetricsReport(
        hits_at=dict(report.reranked_hits or {}),
        accuracy=report.accuracy,
        bucket_accuracy=bucket_acc,
        bucket_counts=bucket_counts,
    )


#: Ablation variants: (uses attention fusion, head kind).
ABLATION_VARIANTS: dict[str, tuple[bool, str]] = {
    "full": (True, "joint"),
    "no_attention": (False, "joint"),
    "no_joint_objective": (True, "binary"),
    "neither": (False, "binary"),
}


def ablate(
    train_claims: list[Claim],
    eval_claims: list[Claim],
    corpus: Corpus,
    index: CellIndex,
    train_config: TrainConfig,
    model_config: ModelConfig | None = None,
) -> dict[str, MetricsReport]:
    """Train and evaluate the four ablation variants on identical data/seed.

    Removes the cross-attention fusion (heads then see the raw encoding
    zero-padded to full width), the reranking component of the objective
    (per-table binary head under a uniform table distribution), and both.
    """
    if model_config is None:
        model_config = ModelConfig()
    reports: dict[str, MetricsReport] = {}
    for name, (use_attention, head) in ABLATION_VARIANTS.items():
        variant_model = replace(model_config, use_attention=use_attention)
        variant_train = replace(train_config, head=head)
        checkpoint = train(train_claims, corpus, index, variant_train, variant_model)
        evaluation = evaluate_checkpoint(
            checkpoint, eval_claims, corpus, index, compute_gold_rank=True
        )
        reports[name] = report_from_eval(evaluation)
    return reports


@dataclass
class AttentionSummary:
    """Mean cross-attention maps grouped by (head, gold-rank bucket).

    ``matrices[(head, bucket)]`` is the arithmetic mean of the k x k
    attention of every claim in the bucket; ``counts`` holds group sizes.
    Means of row-stochastic matrices stay row-stochastic.
    """

    matrices: dict[tuple[int, Bucket], np.ndarray]
    counts: dict[tuple[int, Bucket], int]


def attention_summary(
    per_claim: Mapping[str, np.ndarray], buckets: Mapping[str, Bucket]
) -> AttentionSummary:
    """Average attention matrices within each (head, bucket) group.

    Claims missing from ``buckets`` are skipped; all contributing matrices
    must share one (heads, k, k) shape.
    """
    sums: dict[tuple[int, Bucket], np.ndarray] = {}
    counts: dict[tuple[int, Bucket], int] = {}
    shape: tuple[int, ...] | None = None
    for claim_id, attention in per_claim.items():
        bucket = buckets.get(claim_id)
        if bucket is None:
            continue
        attention = np.asarray(attention, dtype=np.float64)
        if shape is None:
            shape = attention.shape
        elif attention.shape != shape:
            raise ValueError(
                f"attention shape {attention.shape} for claim {claim_id!r} "
                f"does not match {shape}"
            )
        for head in range(attention.shape[0]):
            key = (head, bucket)
            if key in sums:
                sums[key] += attention[head]
                counts[key] += 1
            else:
                sums[key] = attention[head].copy()
                counts[key] = 1
    return AttentionSummary(
        matrices={key: sums[key] / counts[key] for key in sums},
        counts=counts,
    )


def hits_csv(hits_by_run: Mapping[str, Mapping[int, float]]) -> str:
    """Rows of Hits@k per run, in the layout of the retrieval comparisons."""
    ks = sorted({k for hits in hits_by_run.values() for k in hits})
    lines = ["run," + ",".join(f"h@{k}" for k in ks)]
    for run, hits in hits_by_run.items():
        lines.append(run + "," + ",".join(repr(hits.get(k, "")) for k in ks))
    return "\n".join(lines) + "\n"


def bucket_csv(report: MetricsReport) -> str:
    """Accuracy per gold-rank bucket as CSV."""
    lines = ["bucket,accuracy,count"]
    for bucket in Bucket:
        if bucket.value in report.bucket_counts:
            lines.append(
                f"{bucket.value},{report.bucket_accuracy[bucket.value]!r},"
                f"{report.bucket_counts[bucket.value]}"
            )
    return "\n".join(lines) + "\n"


def attention_csv(summary: AttentionSummary) -> str:
    """All mean attention matrices flattened into one long-form CSV."""
    lines = ["head,bucket,from,to,weight"]
    for (head, bucket), matrix in sorted(
        summary.matrices.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
    ):
        for i in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                lines.append(f"{head},{bucket.value},{i + 1},{j + 1},{matrix[i, j]!r}")
    return "\n".join(lines) + "\n"


def report_json(report: MetricsReport, config_hash: str) -> str:
    payload = report.to_dict()
    payload["config_hash"] = config_hash
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
