import numpy as np
import pytest

from tabverify.corpus import Claim
from tabverify.evalkit import (
    ABLATION_VARIANTS,
    Bucket,
    attention_csv,
    attention_summary,
    bucket_csv,
    bucket_of,
    bucketize_by_gold_rank,
    gold_rank,
    hits_at_k,
    hits_csv,
    report_from_eval,
)
from tabverify.fusion import fuse, init_fusion, pad_unfused


def claims_with_gold(golds):
    return [Claim(id=f"c{i}", text="x", gold_table_id=g) for i, g in enumerate(golds)]


class TestHitsAtK:
    def test_perfect_retrieval_is_one_at_every_k(self):
        claims = claims_with_gold(["a", "b"])
        rankings = {"c0": ["a", "x"], "c1": ["b", "y"]}
        hits = hits_at_k(claims, rankings, [1, 3, 5])
        assert hits == {1: 1.0, 3: 1.0, 5: 1.0}

    def test_toy_fractions_counted_by_hand(self):
        claims = claims_with_gold(["a", "b", "c", "d"])
        rankings = {
            "c0": ["a", "b", "x"],  # rank 1
            "c1": ["x", "b", "y"],  # rank 2
            "c2": ["x", "y", "c"],  # rank 3
            "c3": ["x", "y", "z"],  # absent
        }
        hits = hits_at_k(claims, rankings, [1, 2, 3])
        assert hits == {1: 0.25, 2: 0.5, 3: 0.75}

    def test_non_decreasing_in_k(self):
        rng = np.random.default_rng(5)
        ids = [f"t{i}" for i in range(10)]
        claims = claims_with_gold([str(rng.choice(ids)) for _ in range(30)])
        rankings = {
            c.id: list(rng.permutation(ids)) for c in claims
        }
        hits = hits_at_k(claims, rankings, range(1, 11))
        values = [hits[k] for k in range(1, 11)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_claim_without_gold_rejected(self):
        with pytest.raises(ValueError, match="gold"):
            hits_at_k([Claim(id="c", text="x")], {"c": ["a"]}, [1])


class TestBuckets:
    def test_rank_to_bucket_rules(self):
        assert bucket_of(1) is Bucket.RANK_1
        assert bucket_of(2) is Bucket.RANK_2_3
        assert bucket_of(3) is Bucket.RANK_2_3
        assert bucket_of(4) is Bucket.RANK_4_5
        assert bucket_of(5) is Bucket.RANK_4_5
        assert bucket_of(6) is Bucket.BEYOND
        assert bucket_of(None) is Bucket.BEYOND

    def test_bucketize_assignment(self):
        claims = claims_with_gold(["a", "b", "c"])
        rankings = {
            "c0": ["a", "x", "y", "z", "w"],
            "c1": ["x", "y", "b", "z", "w"],
            "c2": ["x", "y", "z", "w", "v"],
        }
        buckets = bucketize_by_gold_rank(claims, rankings)
        assert buckets == {
            "c0": Bucket.RANK_1,
            "c1": Bucket.RANK_2_3,
            "c2": Bucket.BEYOND,
        }

    def test_gold_rank_helper(self):
        assert gold_rank(["a", "b"], "b") == 2
        assert gold_rank(["a", "b"], "zz") is None


class TestAblate:
    def test_exactly_four_variants(self, ablation_reports):
        assert set(ablation_reports) == set(ABLATION_VARIANTS)
        assert len(ablation_reports) == 4

    def test_full_model_leads_every_ablation(self, ablation_reports):
        full = ablation_reports["full"].accuracy
        for name in ("no_attention", "no_joint_objective", "neither"):
            assert full >= ablation_reports[name].accuracy

    def test_removal_ordering_is_monotone(self, ablation_reports):
        assert (
            ablation_reports["full"].accuracy
            >= ablation_reports["no_attention"].accuracy
            >= ablation_reports["neither"].accuracy
        )

    def test_k1_attention_differs_only_in_attended_component(self):
        # With a single table there is nothing to attend over: the fused
        # vector's first half is the raw encoding either way, and the
        # attended half is the deterministic value projection.
        rng = np.random.default_rng(0)
        params = init_fusion(8, 2, rng)
        f = rng.standard_normal((1, 8))
        attended = fuse(f, params)
        padded = pad_unfused(f, 8)
        assert np.array_equal(attended.fused[:, :8], padded.fused[:, :8])
        expected = np.concatenate([params.wv[0] @ f[0], params.wv[1] @ f[0]])
        assert np.allclose(attended.fused[0, 8:], expected, atol=1e-12)
        assert attended.attention[0, 0, 0] == pytest.approx(1.0)


class TestAttentionSummary:
    def test_single_claim_summary_is_its_own_attention(self):
        attention = np.random.default_rng(0).random((2, 3, 3))
        attention /= attention.sum(axis=2, keepdims=True)
        summary = attention_summary({"c0": attention}, {"c0": Bucket.RANK_1})
        assert np.allclose(summary.matrices[(0, Bucket.RANK_1)], attention[0])
        assert np.allclose(summary.matrices[(1, Bucket.RANK_1)], attention[1])

    def test_mean_is_idempotent_for_identical_claims(self):
        attention = np.random.default_rng(1).random((1, 2, 2))
        attention /= attention.sum(axis=2, keepdims=True)
        summary = attention_summary(
            {"a": attention, "b": attention.copy()},
            {"a": Bucket.RANK_1, "b": Bucket.RANK_1},
        )
        assert summary.counts[(0, Bucket.RANK_1)] == 2
        assert np.allclose(summary.matrices[(0, Bucket.RANK_1)], attention[0])

    def test_hand_averaged_mixed_set(self):
        a = np.array([[[1.0, 0.0], [0.25, 0.75]]])
        b = np.array([[[0.5, 0.5], [0.75, 0.25]]])
        summary = attention_summary(
            {"a": a, "b": b}, {"a": Bucket.RANK_2_3, "b": Bucket.RANK_2_3}
        )
        assert np.allclose(
            summary.matrices[(0, Bucket.RANK_2_3)],
            np.array([[0.75, 0.25], [0.5, 0.5]]),
        )

    def test_mean_matrices_remain_row_stochastic(self, joint_eval):
        per_claim = {
            r.claim_id: r.attention for r in joint_eval.records
            if r.attention is not None and r.attention.shape == (2, 3, 3)
        }
        buckets = {r.claim_id: bucket_of(r.gold_rank) for r in joint_eval.records}
        summary = attention_summary(per_claim, buckets)
        assert summary.matrices
        for matrix in summary.matrices.values():
            assert np.abs(matrix.sum(axis=1) - 1.0).max() < 1e-6

    def test_mismatched_shapes_rejected(self):
        a = np.full((1, 2, 2), 0.5)
        b = np.full((1, 3, 3), 1 / 3)
        with pytest.raises(ValueError, match="shape"):
            attention_summary(
                {"a": a, "b": b}, {"a": Bucket.RANK_1, "b": Bucket.RANK_1}
            )

    def test_unbucketed_claims_skipped(self):
        a = np.full((1, 2, 2), 0.5)
        summary = attention_summary({"a": a, "b": a}, {"a": Bucket.RANK_1})
        assert summary.counts == {(0, Bucket.RANK_1): 1}


class TestReports:
    def test_report_from_eval_carries_buckets(self, joint_eval):
        report = report_from_eval(joint_eval)
        assert report.accuracy == joint_eval.accuracy
        assert sum(report.bucket_counts.values()) == joint_eval.n_evaluated
        for accuracy in report.bucket_accuracy.values():
            assert 0.0 <= accuracy <= 1.0

    def test_csv_emitters_shapes(self, joint_eval):
        report = report_from_eval(joint_eval)
        bucket_text = bucket_csv(report)
        assert bucket_text.startswith("bucket,accuracy,count")
        hits_text = hits_csv({"run": {1: 0.5, 5: 0.9}})
        assert "h@1" in hits_text and "h@5" in hits_text
        per_claim = {
            r.claim_id: r.attention
            for r in joint_eval.records
            if r.attention is not None and r.attention.shape == (2, 3, 3)
        }
        buckets = {r.claim_id: bucket_of(r.gold_rank) for r in joint_eval.records}
        csv_text = attention_csv(attention_summary(per_claim, buckets))
        assert csv_text.startswith("head,bucket,from,to,weight")
