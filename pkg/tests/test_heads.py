import math

import numpy as np
import pytest

from oracles import finite_difference, max_relative_error
from tabverify.heads import (
    HeadParams,
    JointDistribution,
    TernaryDistribution,
    binary_backward,
    binary_forward,
    binary_loss,
    init_heads,
    inject_gold,
    injection_stats,
    joint_backward,
    joint_forward,
    joint_loss,
    marginal_rerank,
    marginal_verdict,
    sample_head_dropout,
    ternary_backward,
    ternary_forward,
    ternary_labels,
    ternary_loss,
    ternary_verdict,
)
from tabverify.retriever import ScoredTable

FUSED_DIM = 8
HIDDEN = 6


def head_params(seed=0) -> HeadParams:
    return init_heads(FUSED_DIM, HIDDEN, np.random.default_rng(seed))


def random_fused(k, seed=0):
    return np.random.default_rng(seed).standard_normal((k, FUSED_DIM))


class TestJointForward:
    def test_uniform_logits_give_uniform_distribution(self):
        params = head_params()
        params.joint.w2 = params.joint.w2 * 0.0
        params.joint.b2 = params.joint.b2 * 0.0
        dist = joint_forward(random_fused(4), params)
        assert np.allclose(dist.probs, 1.0 / 8, atol=1e-12)

    def test_k_equals_one_reduces_to_binary_softmax(self):
        params = head_params()
        fused = random_fused(1, seed=5)
        dist = joint_forward(fused, params)
        assert dist.probs.shape == (1, 2)
        assert dist.probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_explicit_logit_matrix_hand_softmax(self):
        # Hand computation: softmax of the flattened logits [1, 0, 0, 0].
        logits = np.array([[1.0, 0.0], [0.0, 0.0]])
        flat = np.exp([1.0, 0.0, 0.0, 0.0])
        expected = (flat / flat.sum()).reshape(2, 2)
        dist = JointDistribution(probs=expected)
        assert dist.probs[0, 0] == pytest.approx(math.e / (math.e + 3), abs=1e-12)
        assert np.allclose(dist.probs.reshape(-1)[1:], 1.0 / (math.e + 3), atol=1e-12)

    def test_total_mass_is_one_on_random_draws(self):
        for seed in range(50):
            params = head_params(seed)
            dist = joint_forward(random_fused(3, seed), params)
            assert abs(dist.probs.sum() - 1.0) <= 1e-9

    def test_logit_shift_invariance(self):
        params = head_params(1)
        fused = random_fused(3, seed=2)
        base = joint_forward(fused, params)
        shifted_params = head_params(1)
        shifted_params.joint.b2 = shifted_params.joint.b2 + 7.5  # shifts all logits
        shifted = joint_forward(fused, shifted_params)
        assert np.allclose(base.probs, shifted.probs, atol=1e-9)

    def test_nonfinite_logits_rejected(self):
        params = head_params()
        params.joint.w1 = params.joint.w1 * np.inf
        with np.errstate(invalid="ignore"), pytest.raises(ValueError, match="finite"):
            joint_forward(random_fused(2), params)


class TestMarginals:
    def test_uniform_joint_gives_even_split(self):
        dist = JointDistribution(probs=np.full((4, 2), 1.0 / 8))
        assert marginal_verdict(dist) == (pytest.approx(0.5), pytest.approx(0.5))
        assert np.allclose(marginal_rerank(dist), 0.25)

    def test_hand_marginals(self):
        dist = JointDistribution(probs=[[0.7, 0.1], [0.1, 0.1]])
        p_true, p_false = marginal_verdict(dist)
        assert p_true == pytest.approx(0.8, abs=1e-12)
        assert p_false == pytest.approx(0.2, abs=1e-12)
        assert np.allclose(marginal_rerank(dist), [0.8, 0.2])

    def test_k_equals_one_identity(self):
        dist = JointDistribution(probs=[[0.3, 0.7]])
        assert marginal_verdict(dist) == (pytest.approx(0.3), pytest.approx(0.7))
        assert np.allclose(marginal_rerank(dist), [1.0])

    def test_marginals_recompose_to_unit_mass(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            raw = rng.random((int(rng.integers(1, 6)), 2))
            dist = JointDistribution(probs=raw / raw.sum())
            p_true, p_false = marginal_verdict(dist)
            assert p_true + p_false == pytest.approx(1.0, abs=1e-9)
            assert marginal_rerank(dist).sum() == pytest.approx(1.0, abs=1e-9)


class TestJointLoss:
    def test_perfect_prediction_is_zero(self):
        dist = JointDistribution(probs=[[1.0, 0.0], [0.0, 0.0]])
        assert joint_loss(dist, 0, True) == 0.0

    def test_uniform_is_log_2k(self):
        dist = JointDistribution(probs=np.full((3, 2), 1.0 / 6))
        assert joint_loss(dist, 1, False) == pytest.approx(math.log(6), abs=1e-12)

    def test_hand_example(self):
        dist = JointDistribution(probs=[[0.7, 0.1], [0.1, 0.1]])
        assert joint_loss(dist, 0, True) == pytest.approx(-math.log(0.7), abs=1e-12)

    def test_out_of_range_gold_rejected(self):
        dist = JointDistribution(probs=[[0.5, 0.5]])
        with pytest.raises(IndexError):
            joint_loss(dist, 1, True)


class TestTernary:
    def test_equal_logits_give_thirds(self):
        params = head_params()
        fused = np.zeros((2, FUSED_DIM))
        params.ternary.w1 = params.ternary.w1 * 0.0
        params.ternary.b1 = params.ternary.b1 * 0.0
        params.ternary.w2 = params.ternary.w2 * 0.0
        params.ternary.b2 = params.ternary.b2 * 0.0
        dist = ternary_forward(fused, params)
        assert np.allclose(dist.probs, 1.0 / 3, atol=1e-12)

    def test_row_sums_are_one_on_random_draws(self):
        for seed in range(50):
            dist = ternary_forward(random_fused(4, seed), head_params(seed))
            assert np.abs(dist.probs.sum(axis=1) - 1.0).max() <= 1e-9

    def test_k1_hand_softmax(self):
        logits = np.array([1.0, 2.0, 0.5])
        expected = np.exp(logits) / np.exp(logits).sum()
        dist = TernaryDistribution(probs=expected.reshape(1, 3))
        assert dist.probs[0, 1] == pytest.approx(float(expected[1]), abs=1e-12)

    def test_loss_perfect_prediction_is_zero(self):
        dist = TernaryDistribution(probs=[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert ternary_loss(dist, 0, True) == 0.0

    def test_loss_uniform_is_log_three(self):
        dist = TernaryDistribution(probs=np.full((5, 3), 1.0 / 3))
        assert ternary_loss(dist, 2, False) == pytest.approx(math.log(3), abs=1e-12)

    def test_loss_hand_mean_of_two_rows(self):
        dist = TernaryDistribution(probs=[[0.7, 0.2, 0.1], [0.2, 0.3, 0.5]])
        expected = (-math.log(0.7) - math.log(0.5)) / 2.0
        assert ternary_loss(dist, 0, True) == pytest.approx(expected, abs=1e-12)

    def test_labels_layout(self):
        labels = ternary_labels(4, 2, False)
        assert labels.tolist() == [2, 2, 1, 2]

    def test_verdict_single_table(self):
        dist = TernaryDistribution(probs=[[0.6, 0.1, 0.3]])
        assert ternary_verdict(dist) is True

    def test_verdict_exact_tie_is_false(self):
        dist = TernaryDistribution(probs=[[0.2, 0.2, 0.6], [0.2, 0.2, 0.6]])
        assert ternary_verdict(dist) is False

    def test_verdict_mixed_rows_column_sums(self):
        dist = TernaryDistribution(
            probs=[[0.5, 0.2, 0.3], [0.1, 0.6, 0.3], [0.3, 0.3, 0.4]]
        )
        # true mass 0.9 < false mass 1.1
        assert ternary_verdict(dist) is False


class TestBinaryReduction:
    def test_masked_ternary_equals_per_table_binary_softmax(self):
        params = head_params(7)
        fused = random_fused(4, seed=8)
        from tabverify.heads import _mlp_logits

        logits = _mlp_logits(fused, params.ternary)
        dist = binary_forward(fused, params)
        assert np.allclose(dist.probs[:, 2], 0.0, atol=1e-300)
        for row in range(4):
            pair = np.exp(logits[row, :2] - logits[row, :2].max())
            assert np.allclose(dist.probs[row, :2], pair / pair.sum(), atol=1e-12)

    def test_binary_loss_scores_gold_row_only(self):
        params = head_params(7)
        fused = random_fused(3, seed=9)
        dist = binary_forward(fused, params)
        assert binary_loss(dist, 1, True) == pytest.approx(
            -math.log(dist.probs[1, 0]), abs=1e-12
        )


class TestInjectGold:
    def setup_method(self):
        injection_stats.reset()

    def scored(self, *ids):
        return [ScoredTable(table_id=t, score=1.0) for t in ids]

    def test_gold_already_present_unchanged(self):
        out = inject_gold(self.scored("g", "b", "c", "d", "e"), "g")
        assert out == ["g", "b", "c", "d", "e"]
        assert injection_stats.calls == 1
        assert injection_stats.replacements == 0

    def test_gold_absent_replaces_last(self):
        out = inject_gold(self.scored("a", "b", "c", "d", "e"), "g")
        assert out == ["a", "b", "c", "d", "g"]
        assert injection_stats.replacements == 1

    def test_k_equals_one_degenerate(self):
        assert inject_gold(self.scored("a"), "g") == ["g"]

    def test_test_time_call_rejected(self):
        with pytest.raises(RuntimeError, match="training"):
            inject_gold(self.scored("a"), "g", training=False)
        assert injection_stats.calls == 0

    def test_accepts_plain_id_lists(self):
        assert inject_gold(["a", "b"], "b") == ["a", "b"]

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            inject_gold([], "g")


class TestDistributionValidation:
    def test_joint_mass_enforced(self):
        with pytest.raises(ValueError, match="mass"):
            JointDistribution(probs=[[0.5, 0.6]])
        with pytest.raises(ValueError, match="negative"):
            JointDistribution(probs=[[1.1, -0.1]])

    def test_ternary_row_mass_enforced(self):
        with pytest.raises(ValueError, match="sum"):
            TernaryDistribution(probs=[[0.5, 0.2, 0.2]])

    def test_shapes_enforced(self):
        with pytest.raises(ValueError):
            JointDistribution(probs=[[0.3, 0.3, 0.4]])
        with pytest.raises(ValueError):
            TernaryDistribution(probs=[[0.5, 0.5]])


class TestHeadGradients:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize(
        "backward,loss_of",
        [
            (joint_backward, lambda d, i, v: joint_loss(d, i, v)),
            (ternary_backward, lambda d, i, v: ternary_loss(d, i, v)),
            (binary_backward, lambda d, i, v: binary_loss(d, i, v)),
        ],
        ids=["joint", "ternary", "binary"],
    )
    def test_gradients_match_finite_differences(self, seed, backward, loss_of):
        rng = np.random.default_rng(seed)
        params = head_params(seed + 50)
        fused = rng.standard_normal((3, FUSED_DIM))
        gold_index = int(rng.integers(0, 3))
        gold_verdict = bool(rng.integers(0, 2))

        loss, grads, d_fused = backward(fused, params, gold_index, gold_verdict)
        forward = {
            joint_backward: joint_forward,
            ternary_backward: ternary_forward,
            binary_backward: binary_forward,
        }[backward]
        assert loss == pytest.approx(
            loss_of(forward(fused, params), gold_index, gold_verdict), abs=1e-9
        )

        mlp = params.joint if backward is joint_backward else params.ternary

        def loss_fn():
            return loss_of(forward(fused, params), gold_index, gold_verdict)

        numeric = finite_difference(loss_fn, {**mlp.tensors(), "fused": fused}, eps=1e-4)
        for name in ("w1", "b1", "w2", "b2"):
            assert max_relative_error(getattr(grads, name), numeric[name]) < 1e-4
        assert max_relative_error(d_fused, numeric["fused"]) < 1e-4

    def test_gradients_with_dropout_match_finite_differences(self):
        rng = np.random.default_rng(11)
        params = head_params(11)
        fused = rng.standard_normal((2, FUSED_DIM))
        masks = sample_head_dropout(2, FUSED_DIM, HIDDEN, 0.25, rng)

        loss, grads, d_fused = joint_backward(fused, params, 0, True, masks)

        def loss_fn():
            return joint_loss(joint_forward(fused, params, masks), 0, True)

        numeric = finite_difference(
            loss_fn, {**params.joint.tensors(), "fused": fused}, eps=1e-4
        )
        for name in ("w1", "b1", "w2", "b2"):
            assert max_relative_error(getattr(grads, name), numeric[name]) < 1e-4
        assert max_relative_error(d_fused, numeric["fused"]) < 1e-4

    def test_losses_nonnegative_random(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            params = head_params(seed)
            fused = rng.standard_normal((3, FUSED_DIM))
            assert joint_loss(joint_forward(fused, params), 0, True) >= 0.0
            assert ternary_loss(ternary_forward(fused, params), 0, True) >= 0.0
