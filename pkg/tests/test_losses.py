"""
Tests for the ranking, basis cross-entropy, similarity distribution and
cross-entropy baseline losses.
"""
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.error_handler import ShapeMismatchError, ValidationError
from src.losses import (
    GaussStats, PairSet, RankingMargins, SDConfig, balanced_rank_loss, basis_ce_loss,
    batch_pair_similarities, contrastive_rank_loss, global_ce_loss, local_ce_pair_loss,
    pair_similarity_backward, sd_loss, similarity_objective, update_gauss_stats,
)
from src.numerics import cosine_similarity, finite_diff_gradient, relative_error


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _stats(mu_pos, mu_neg, var_pos=0.0, var_neg=0.0, beta=0.0):
    return GaussStats(mu_pos=mu_pos, var_pos=var_pos, mu_neg=mu_neg, var_neg=var_neg, beta=beta,
                      pos_initialized=True, neg_initialized=True)


class TestPairTypes:
    """Margins and pair sets."""

    def test_margins_ordered(self):
        """m_pos must lie below m_neg."""
        with pytest.raises(ValidationError):
            RankingMargins(1.0, 0.5)

    def test_from_labels(self):
        """Every unordered pair is routed by label agreement."""
        pairs = PairSet.from_labels([0, 0, 1])
        assert pairs.positive_pairs.tolist() == [[0, 1]]
        assert pairs.negative_pairs.tolist() == [[0, 2], [1, 2]]
        assert pairs.size == 3

    def test_self_pair_rejected(self):
        """(i, i) pairs are invalid."""
        with pytest.raises(ValidationError):
            PairSet([[1, 1]], []).validate(3)

    def test_out_of_range_rejected(self):
        """Indices must fall inside the batch."""
        with pytest.raises(ValidationError):
            PairSet([], [[0, 5]]).validate(3)


class TestContrastiveRankLoss:
    """Margin ranking loss on unit embeddings."""

    def test_identical_positive(self):
        """An identical positive pair with m_pos = 0 costs nothing."""
        e = np.array([[1.0, 0.0], [1.0, 0.0]])
        result = contrastive_rank_loss(e, PairSet([[0, 1]], []), RankingMargins(0.0, 1.0))
        assert result.loss == 0.0
        assert np.all(result.grad_embeddings == 0.0)

    def test_antipodal_negative(self):
        """Antipodal negatives (d = 2) are beyond any margin below 2."""
        e = np.array([[1.0, 0.0], [-1.0, 0.0]])
        result = contrastive_rank_loss(e, PairSet([], [[0, 1]]), RankingMargins(0.2, 0.5))
        assert result.loss == 0.0

    def test_fixed_batch_recomputation(self):
        """Four fixed unit vectors: loss equals a scalar recomputation, gradient matches FD."""
        e = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [0.28, 0.96]])
        pairs = PairSet([[0, 1]], [[2, 3]])
        margins = RankingMargins(0.2, 1.0)
        result = contrastive_rank_loss(e, pairs, margins)
        d01 = np.linalg.norm(e[0] - e[1])
        d23 = np.linalg.norm(e[2] - e[3])
        expected = (max(d01 - 0.2, 0.0) + max(1.0 - d23, 0.0)) / 2
        assert result.loss == pytest.approx(expected, abs=1e-12)
        assert result.active_pairs == 2
        numeric = finite_diff_gradient(lambda x: contrastive_rank_loss(x, pairs, margins).loss, e)
        assert relative_error(result.grad_embeddings, numeric) < 1e-4

    def test_empty_pairs_flag_starvation(self):
        """No pairs at all gives zero loss and the starved flag."""
        result = contrastive_rank_loss(np.eye(2), PairSet.empty(), RankingMargins())
        assert result.starved and result.loss == 0.0

    def test_distance_similarity_consistency(self, rng):
        """On unit vectors d^2 = 2 - 2 cos."""
        e = _unit_rows(rng, 2, 5)
        d = np.linalg.norm(e[0] - e[1])
        assert abs(d ** 2 - (2 - 2 * cosine_similarity(e[0], e[1]))) < 1e-12

    def test_nonnegative(self, rng):
        """Random batches never give a negative loss."""
        for _ in range(20):
            e = _unit_rows(rng, 6, 3)
            labels = rng.integers(3, size=6)
            assert contrastive_rank_loss(e, PairSet.from_labels(labels), RankingMargins()).loss >= 0


class TestBalancedRankLoss:
    """Ranking loss with equal weight on the positive and negative sides."""

    def test_sides_weighted_equally(self):
        """One positive and three negatives: the mean of the two per-side losses."""
        e = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.8, 0.6]])
        pos = [[0, 1]]
        neg = [[0, 2], [0, 3], [1, 3]]
        margins = RankingMargins(0.2, 1.0)
        result = balanced_rank_loss(e, PairSet(pos, neg), margins)
        pos_only = contrastive_rank_loss(e, PairSet(pos, []), margins)
        neg_only = contrastive_rank_loss(e, PairSet([], neg), margins)
        assert result.loss == pytest.approx((pos_only.loss + neg_only.loss) / 2, abs=1e-12)
        np.testing.assert_allclose(
            result.grad_embeddings, (pos_only.grad_embeddings + neg_only.grad_embeddings) / 2,
            atol=1e-12)
        assert result.active_pairs == pos_only.active_pairs + neg_only.active_pairs

    def test_one_side_is_plain_loss(self, rng):
        """With no negatives the plain ranking loss is returned."""
        e = _unit_rows(rng, 4, 3)
        pairs = PairSet([[0, 1], [2, 3]], [])
        plain = contrastive_rank_loss(e, pairs, RankingMargins())
        result = balanced_rank_loss(e, pairs, RankingMargins())
        assert result.loss == pytest.approx(plain.loss, abs=1e-12)
        assert not result.starved

    def test_empty_is_starved(self):
        """No pairs on either side."""
        result = balanced_rank_loss(np.eye(2), PairSet.empty(), RankingMargins())
        assert result.starved and result.loss == 0.0
        assert np.all(result.grad_embeddings == 0.0)

    def test_gradient_matches_finite_differences(self, rng):
        """Analytic gradient agrees with central differences."""
        e = _unit_rows(rng, 6, 3)
        pairs = PairSet([[0, 1], [2, 3]], [[0, 4], [1, 5], [3, 5], [2, 4]])
        margins = RankingMargins(0.1, 1.5)
        result = balanced_rank_loss(e, pairs, margins)
        numeric = finite_diff_gradient(lambda x: balanced_rank_loss(x, pairs, margins).loss, e)
        assert relative_error(result.grad_embeddings, numeric) < 1e-4


class TestBasisCELoss:
    """Softmax cross-entropy on basis logits."""

    def test_uniform_logits(self):
        """W_a = 0 with C classes gives ln C."""
        w = np.zeros((5, 3))
        f = np.ones((4, 3))
        assert basis_ce_loss(w, f, [0, 1, 2, 4]).loss == pytest.approx(math.log(5), abs=1e-12)

    def test_dominant_logit(self):
        """A correct logit of 50 over zeros drives the loss below 1e-20."""
        w = np.array([[50.0], [0.0], [0.0]])
        assert basis_ce_loss(w, np.array([[1.0]]), [0]).loss < 1e-20

    def test_gradients_match_finite_differences(self, rng):
        """Random W_a (5x3), 4 samples: both gradients agree with central differences."""
        w = rng.normal(size=(5, 3))
        f = rng.normal(size=(4, 3))
        y = np.array([0, 3, 4, 1])
        result = basis_ce_loss(w, f, y)
        num_w = finite_diff_gradient(lambda x: basis_ce_loss(x, f, y).loss, w)
        num_f = finite_diff_gradient(lambda x: basis_ce_loss(w, x, y).loss, f)
        assert relative_error(result.grad_basis, num_w) < 1e-4
        assert relative_error(result.grad_embeddings, num_f) < 1e-4

    def test_label_out_of_range(self):
        """A label beyond the basis rows is rejected."""
        with pytest.raises(ValidationError):
            basis_ce_loss(np.eye(2), np.eye(2), [0, 2])

    def test_dim_mismatch(self):
        """Embedding and basis widths must agree."""
        with pytest.raises(ShapeMismatchError):
            basis_ce_loss(np.eye(2), np.ones((1, 3)), [0])


class TestBatchPairSimilarities:
    """Projected cosine similarities."""

    def test_identical_pair(self):
        """Same pseudo label and f_i = f_j gives one positive similarity of 1."""
        sims = batch_pair_similarities(np.eye(2), np.array([[0.3, 0.4], [0.3, 0.4]]), [1, 1])
        np.testing.assert_allclose(sims.pos_sims, [1.0])
        assert sims.neg_sims.size == 0

    def test_orthogonal_pair(self):
        """W_a = I and orthogonal f with different labels gives a negative of 0."""
        sims = batch_pair_similarities(np.eye(2), np.eye(2), [0, 1])
        np.testing.assert_allclose(sims.neg_sims, [0.0])
        assert sims.pos_sims.size == 0

    def test_brute_force_partition(self, rng):
        """6 samples and 2 pseudo classes: 15 pairs, each equal to a direct recomputation."""
        w = rng.normal(size=(4, 3))
        f = rng.normal(size=(6, 3))
        labels = np.array([0, 1, 0, 1, 1, 0])
        sims = batch_pair_similarities(w, f, labels)
        assert sims.pos_sims.size + sims.neg_sims.size == 15
        for pairs, values, same in ((sims.pos_pairs, sims.pos_sims, True),
                                    (sims.neg_pairs, sims.neg_sims, False)):
            for (i, j), s in zip(pairs, values):
                assert (labels[i] == labels[j]) == same
                assert s == pytest.approx(cosine_similarity(w @ f[i], w @ f[j]), abs=1e-12)

    def test_degenerate_projection_skipped(self):
        """A projection of zero norm drops its pairs and is tallied."""
        w = np.array([[1.0, 0.0]])
        f = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
        sims = batch_pair_similarities(w, f, [0, 0, 0])
        assert sims.degenerate_pairs == 2
        np.testing.assert_allclose(sims.pos_sims, [1.0])

    def test_single_sample(self):
        """One sample forms no pair."""
        with pytest.raises(ValidationError):
            batch_pair_similarities(np.eye(2), np.ones((1, 2)), [0])

    def test_backward_matches_finite_differences(self, rng):
        """Similarity gradients reach W_a and f exactly."""
        w = rng.normal(size=(4, 3))
        f = rng.normal(size=(5, 3))
        sims = batch_pair_similarities(w, f, [0, 0, 1, 1, 0])
        pairs = np.concatenate([sims.pos_pairs, sims.neg_pairs])
        g = rng.normal(size=len(pairs))

        def weighted(wx, fx):
            s = batch_pair_similarities(wx, fx, [0, 0, 1, 1, 0])
            return float(g @ np.concatenate([s.pos_sims, s.neg_sims]))

        grad_w, grad_f = pair_similarity_backward(w, f, pairs, g)
        assert relative_error(grad_w, finite_diff_gradient(lambda x: weighted(x, f), w)) < 1e-4
        assert relative_error(grad_f, finite_diff_gradient(lambda x: weighted(w, x), f)) < 1e-4


class TestGaussStats:
    """Momentum statistics."""

    def test_beta_zero_adopts_batch(self):
        """With beta = 0 the stats equal the batch statistics."""
        prior = _stats(0.9, 0.7, 0.3, 0.3, beta=0.0)
        new = update_gauss_stats(prior, [0.2, 0.4], [-0.5, 0.1, -0.2])
        assert new.mu_pos == pytest.approx(0.3)
        assert new.var_pos == pytest.approx(0.01)
        assert new.mu_neg == pytest.approx(-0.2)
        assert new.var_neg == pytest.approx(np.var([-0.5, 0.1, -0.2]))

    def test_geometric_contraction(self):
        """Constant batches pull the mean in by a factor beta per update."""
        beta = 0.7
        stats = _stats(0.0, -0.5, beta=beta)
        for n in range(1, 8):
            stats = update_gauss_stats(stats, [0.6, 0.6], [])
            assert abs(stats.mu_pos - 0.6) <= beta ** n * 0.6 + 1e-12

    def test_reference_beta(self):
        """beta = 0.99, mu_0 = 0, one batch with mean 1 gives 0.01."""
        stats = update_gauss_stats(_stats(0.0, 0.0, beta=0.99), [1.0, 1.0], [])
        assert stats.mu_pos == pytest.approx(0.01, abs=1e-15)

    def test_first_update_adopts_batch(self):
        """Uninitialized stats take the batch statistics directly."""
        stats = update_gauss_stats(GaussStats(beta=0.99), [0.5, 0.7], [0.1])
        assert stats.initialized
        assert stats.mu_pos == pytest.approx(0.6)
        assert stats.mu_neg == pytest.approx(0.1)
        assert stats.pos_weight == 1.0

    def test_empty_side_unchanged(self):
        """A side without similarities keeps its values."""
        prior = _stats(0.4, 0.1, 0.02, 0.03, beta=0.5)
        new = update_gauss_stats(prior, [0.8], [])
        assert (new.mu_neg, new.var_neg) == (0.1, 0.03)
        assert new.neg_weight == 0.0

    def test_near_one_beta_freezes(self):
        """beta close to 1 barely moves the stats."""
        prior = _stats(0.4, 0.1, beta=0.999999)
        new = update_gauss_stats(prior, [1.0], [-1.0])
        assert abs(new.mu_pos - 0.4) < 1e-5 and abs(new.mu_neg - 0.1) < 1e-5

    def test_beta_range(self):
        """beta must lie in [0, 1)."""
        with pytest.raises(ValidationError):
            GaussStats(beta=1.0)


class TestSDLoss:
    """Similarity distribution loss."""

    def test_fully_separated(self):
        """mu+ = 1, mu- = -1, zero variances, m = 0.5: no loss."""
        result = sd_loss(_stats(1.0, -1.0), [1.0], [-1.0], SDConfig(0.5, 0.25))
        assert result.loss == 0.0

    def test_hinge_active(self):
        """mu+ = mu- = 0 with zero variances costs the margin."""
        result = sd_loss(_stats(0.0, 0.0), [0.0], [0.0], SDConfig(0.5, 0.25))
        assert result.loss == pytest.approx(0.5)

    def test_gradient_matches_finite_differences(self, rng):
        """10/10 random similarities, beta = 0.5: FD with stats recomputed inside the function."""
        prior = _stats(0.3, 0.1, 0.02, 0.04, beta=0.5)
        cfg = SDConfig(0.5, 0.25)
        pos = rng.uniform(-1, 1, size=10)
        neg = rng.uniform(-1, 1, size=10)
        stats = update_gauss_stats(prior, pos, neg)
        assert abs(stats.mu_neg - stats.mu_pos + cfg.margin_m) > 1e-3

        def fn(x):
            p, n = x[:10], x[10:]
            return sd_loss(update_gauss_stats(prior, p, n), p, n, cfg).loss

        result = sd_loss(stats, pos, neg, cfg)
        numeric = finite_diff_gradient(fn, np.concatenate([pos, neg]))
        analytic = np.concatenate([result.grad_pos, result.grad_neg])
        assert relative_error(analytic, numeric) < 1e-4

    def test_hinge_translation_covariant(self, rng):
        """Shifting every similarity by c leaves the hinge unchanged."""
        cfg = SDConfig(0.5, 0.0)
        pos = rng.uniform(-0.5, 0.5, size=6)
        neg = rng.uniform(-0.5, 0.5, size=6)
        base = sd_loss(update_gauss_stats(GaussStats(beta=0.9), pos, neg), pos, neg, cfg)
        moved = sd_loss(update_gauss_stats(GaussStats(beta=0.9), pos + 0.3, neg + 0.3),
                        pos + 0.3, neg + 0.3, cfg)
        assert moved.loss == pytest.approx(base.loss, abs=1e-12)

    def test_empty_batch_flagged(self):
        """No similarities at all gives zero loss with the flag."""
        result = sd_loss(_stats(0.0, 0.0), [], [], SDConfig())
        assert result.empty_batch and result.loss == 0.0

    def test_margin_range(self):
        """The margin is a cosine-similarity gap, at most 2."""
        with pytest.raises(ValidationError):
            SDConfig(margin_m=2.5)


class TestCrossEntropyBaselines:
    """Local (per-pair) and global (per-mean) cross-entropy."""

    def test_local_saturation(self):
        """A positive pair at s = 2 (logit 10) costs almost nothing."""
        assert local_ce_pair_loss([2.0], []).loss < 1e-4

    def test_local_chance(self):
        """s = 0 for one positive and one negative pair gives ln 2."""
        assert local_ce_pair_loss([0.0], [0.0]).loss == pytest.approx(math.log(2), abs=1e-12)

    def test_local_gradient(self, rng):
        """Local-CE gradients agree with central differences."""
        pos = rng.uniform(-1, 1, size=5)
        neg = rng.uniform(-1, 1, size=4)
        result = local_ce_pair_loss(pos, neg)

        def fn(x):
            return local_ce_pair_loss(x[:5], x[5:]).loss
        numeric = finite_diff_gradient(fn, np.concatenate([pos, neg]))
        assert relative_error(np.concatenate([result.grad_pos, result.grad_neg]), numeric) < 1e-4

    def test_global_saturation(self):
        """Far-apart means drive the loss to zero."""
        assert global_ce_loss(_stats(5.0, -5.0)).loss < 1e-9

    def test_global_chance(self):
        """Both means at 0 give 2 ln 2."""
        assert global_ce_loss(_stats(0.0, 0.0)).loss == pytest.approx(2 * math.log(2))

    def test_global_gradient(self, rng):
        """Global-CE gradients follow the same batch-term convention as the SD loss."""
        prior = _stats(0.2, 0.1, beta=0.5)
        pos = rng.uniform(-1, 1, size=4)
        neg = rng.uniform(-1, 1, size=3)

        def fn(x):
            return global_ce_loss(update_gauss_stats(prior, x[:4], x[4:]), x[:4], x[4:]).loss
        result = global_ce_loss(update_gauss_stats(prior, pos, neg), pos, neg)
        numeric = finite_diff_gradient(fn, np.concatenate([pos, neg]))
        assert relative_error(np.concatenate([result.grad_pos, result.grad_neg]), numeric) < 1e-4

    def test_global_needs_initialized_stats(self):
        """Uninitialized statistics are an error."""
        with pytest.raises(ValidationError):
            global_ce_loss(GaussStats())

    def test_objective_dispatch(self):
        """The variant name selects the loss; unknown names are rejected."""
        stats = _stats(0.0, 0.0)
        assert similarity_objective("local_ce", stats, [0.0], [0.0], SDConfig()).loss == \
            pytest.approx(math.log(2))
        with pytest.raises(ValidationError):
            similarity_objective("triplet", stats, [0.0], [0.0], SDConfig())
