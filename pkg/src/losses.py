"""
Differentiable objectives.

- ``contrastive_rank_loss``: pairwise margin ranking loss on unit embeddings
- ``balanced_rank_loss``: the same with positives and negatives weighted equally
- ``basis_ce_loss``: softmax cross-entropy on basis logits W_a f
- ``batch_pair_similarities`` / ``pair_similarity_backward``: cosine similarity
  of basis projections and its exact gradient
- ``update_gauss_stats`` / ``sd_loss``: momentum-tracked Gaussian statistics of
  pseudo-positive and pseudo-negative similarities and the similarity
  distribution loss
- ``local_ce_pair_loss`` / ``global_ce_loss``: cross-entropy baselines

Every loss returns its value together with exact analytic gradients.
"""
import logging
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np
from scipy.special import expit

from .error_handler import ShapeMismatchError, ValidationError
from .numerics import log_softmax, softmax, upper_pairs

logger = logging.getLogger(__name__)

# Norm below which a projected vector W_a f is treated as degenerate
DEGENERATE_NORM = 1e-12
# Logistic scale used by the cross-entropy baselines
DEFAULT_CE_SCALE = 5.0


def _matrix(x) -> np.ndarray:
    return np.asarray(getattr(x, 'embeddings', x), dtype=np.float64)


def _basis_values(basis) -> np.ndarray:
    return np.asarray(getattr(basis, 'values', basis), dtype=np.float64)


def _index_pairs(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeMismatchError(f"pairs must be an (n, 2) array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class RankingMargins:
    """Hinge margins of the ranking loss, as Euclidean distances on the unit sphere."""
    m_pos: float = 0.3
    m_neg: float = 1.0

    def __post_init__(self):
        if self.m_pos < 0 or self.m_neg < 0:
            raise ValidationError("ranking margins must be nonnegative")
        if not self.m_pos < self.m_neg:
            raise ValidationError(f"m_pos ({self.m_pos}) must be below m_neg ({self.m_neg})")


@dataclass(frozen=True, eq=False)
class PairSet:
    """Positive and negative index pairs into one batch."""
    positive_pairs: np.ndarray
    negative_pairs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'positive_pairs', _index_pairs(self.positive_pairs))
        object.__setattr__(self, 'negative_pairs', _index_pairs(self.negative_pairs))

    @classmethod
    def empty(cls) -> "PairSet":
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2), dtype=np.int64))

    @classmethod
    def from_labels(cls, labels) -> "PairSet":
        """Every unordered pair of the batch, split by label agreement."""
        labels = np.asarray(labels)
        i, j = upper_pairs(labels.shape[0])
        same = labels[i] == labels[j]
        return cls(np.stack([i[same], j[same]], axis=1),
                   np.stack([i[~same], j[~same]], axis=1))

    @property
    def size(self) -> int:
        return len(self.positive_pairs) + len(self.negative_pairs)

    def validate(self, count: int) -> None:
        for name, arr in (("positive", self.positive_pairs), ("negative", self.negative_pairs)):
            if arr.size == 0:
                continue
            if arr.min() < 0 or arr.max() >= count:
                raise ValidationError(f"{name} pair index out of range for batch of {count}")
            if np.any(arr[:, 0] == arr[:, 1]):
                raise ValidationError(f"{name} pair (i, i) is not allowed")


@dataclass(frozen=True)
class RankLossResult:
    loss: float
    grad_embeddings: np.ndarray
    starved: bool = False
    active_pairs: int = 0


def _pair_distances(e: np.ndarray, pairs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    diff = e[pairs[:, 0]] - e[pairs[:, 1]]
    return diff, np.linalg.norm(diff, axis=1)


def contrastive_rank_loss(embeddings, pairs: PairSet,
                          margins: RankingMargins) -> RankLossResult:
    """
    Contrastive ranking loss, averaged over the |P| + |N| pairs:

        sum_P max(d - m_pos, 0) + sum_N max(m_neg - d, 0)

    with d the Euclidean distance between embeddings. The gradient is the
    subgradient that is 0 at hinge corners and at coincident points.
    """
    e = _matrix(embeddings)
    pairs.validate(e.shape[0])
    grad = np.zeros_like(e)
    total_pairs = pairs.size
    if total_pairs == 0:
        return RankLossResult(0.0, grad, starved=True)

    loss = 0.0
    active = 0
    for arr, sign in ((pairs.positive_pairs, 1.0), (pairs.negative_pairs, -1.0)):
        if arr.size == 0:
            continue
        diff, d = _pair_distances(e, arr)
        if sign > 0:
            hinge = d - margins.m_pos
        else:
            hinge = margins.m_neg - d
        on = hinge > 0.0
        loss += float(np.sum(hinge[on]))
        active += int(np.count_nonzero(on))
        # d/de_i of d(i, j) is (e_i - e_j) / d
        usable = on & (d > 0.0)
        coeff = np.zeros_like(d)
        coeff[usable] = sign / d[usable]
        contrib = coeff[:, None] * diff
        np.add.at(grad, arr[:, 0], contrib)
        np.add.at(grad, arr[:, 1], -contrib)

    return RankLossResult(loss / total_pairs, grad / total_pairs, False, active)


def balanced_rank_loss(embeddings, pairs: PairSet,
                       margins: RankingMargins) -> RankLossResult:
    """
    Mean of the positive-only and the negative-only ranking losses.

    Each side carries half the weight however unequal |P| and |N| are; with
    one side empty the other side's loss is returned unchanged.
    """
    e = _matrix(embeddings)
    empty = np.zeros((0, 2), dtype=np.int64)
    sides = [contrastive_rank_loss(e, PairSet(pairs.positive_pairs, empty), margins),
             contrastive_rank_loss(e, PairSet(empty, pairs.negative_pairs), margins)]
    sides = [s for s in sides if not s.starved]
    if not sides:
        return RankLossResult(0.0, np.zeros_like(e), starved=True)
    weight = 1.0 / len(sides)
    return RankLossResult(weight * sum(s.loss for s in sides),
                          weight * sum(s.grad_embeddings for s in sides),
                          False, sum(s.active_pairs for s in sides))


@dataclass(frozen=True)
class BasisCEResult:
    loss: float
    grad_basis: np.ndarray
    grad_embeddings: np.ndarray


def basis_ce_loss(basis, embeddings, labels) -> BasisCEResult:
    """Mean over samples of -log softmax(W_a f_i)[y_i]."""
    w = _basis_values(basis)
    f = _matrix(embeddings)
    y = np.asarray(labels, dtype=np.int64)
    if f.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"embedding dim {f.shape[1]} != basis dim {w.shape[1]}")
    if y.shape != (f.shape[0],):
        raise ShapeMismatchError("one label per embedding required")
    n = f.shape[0]
    if n == 0:
        return BasisCEResult(0.0, np.zeros_like(w), np.zeros_like(f))
    if y.min() < 0 or y.max() >= w.shape[0]:
        raise ValidationError(f"label out of range for {w.shape[0]} basis vectors")

    logits = f @ w.T
    rows = np.arange(n)
    loss = float(-np.mean(log_softmax(logits)[rows, y]))
    grad_logits = softmax(logits)
    grad_logits[rows, y] -= 1.0
    grad_logits /= n
    return BasisCEResult(loss, grad_logits.T @ f, grad_logits @ w)


@dataclass(frozen=True, eq=False)
class PairSimilarities:
    """
    Projected cosine similarities of the in-batch pairs.

    ``pos_pairs[k]`` is the index pair that produced ``pos_sims[k]``.
    """
    pos_sims: np.ndarray
    neg_sims: np.ndarray
    pos_pairs: np.ndarray
    neg_pairs: np.ndarray
    degenerate_pairs: int = 0


def _projections(w: np.ndarray, f: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = f @ w.T
    norms = np.linalg.norm(r, axis=1)
    ok = norms >= DEGENERATE_NORM
    u = np.zeros_like(r)
    u[ok] = r[ok] / norms[ok, None]
    return u, norms, ok


def scored_pairs(basis, embeddings) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """
    Score every unordered pair (i < j) by cos(W_a f_i, W_a f_j).

    Returns:
        (i, j, sims, degenerate) over the non-degenerate pairs, in lexicographic order
    """
    w = _basis_values(basis)
    f = _matrix(embeddings)
    if f.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"embedding dim {f.shape[1]} != basis dim {w.shape[1]}")
    u, _, ok = _projections(w, f)
    i, j = upper_pairs(f.shape[0])
    keep = ok[i] & ok[j]
    degenerate = int(np.count_nonzero(~keep))
    i, j = i[keep], j[keep]
    sims = np.clip(np.sum(u[i] * u[j], axis=1), -1.0, 1.0)
    return i, j, sims, degenerate


def batch_pair_similarities(basis, embeddings, pseudo_labels) -> PairSimilarities:
    """
    Route every in-batch pair to the positive side when pseudo labels match,
    to the negative side otherwise. Pairs with a degenerate projection are
    skipped and tallied.
    """
    f = _matrix(embeddings)
    labels = np.asarray(pseudo_labels)
    if f.shape[0] < 2:
        raise ValidationError("at least 2 samples are needed to form pairs")
    if labels.shape != (f.shape[0],):
        raise ShapeMismatchError("one pseudo label per embedding required")
    i, j, sims, degenerate = scored_pairs(basis, f)
    if degenerate:
        logger.debug("skipped %d pairs with degenerate projections", degenerate)
    same = labels[i] == labels[j]
    return PairSimilarities(
        pos_sims=sims[same],
        neg_sims=sims[~same],
        pos_pairs=np.stack([i[same], j[same]], axis=1),
        neg_pairs=np.stack([i[~same], j[~same]], axis=1),
        degenerate_pairs=degenerate,
    )


def pair_similarity_backward(basis, embeddings, pairs,
                             grad_sims) -> Tuple[np.ndarray, np.ndarray]:
    """
    Backpropagate gradients of pair similarities to (W_a, f).

    For s = u_i . u_j with u = r / |r| and r = W_a f:
        ds/dr_i = (u_j - s u_i) / |r_i|
    """
    w = _basis_values(basis)
    f = _matrix(embeddings)
    pairs = _index_pairs(pairs)
    g = np.asarray(grad_sims, dtype=np.float64)
    grad_r = np.zeros((f.shape[0], w.shape[0]))
    if pairs.size:
        u, norms, _ = _projections(w, f)
        i, j = pairs[:, 0], pairs[:, 1]
        s = np.sum(u[i] * u[j], axis=1)
        np.add.at(grad_r, i, g[:, None] * (u[j] - s[:, None] * u[i]) / norms[i, None])
        np.add.at(grad_r, j, g[:, None] * (u[i] - s[:, None] * u[j]) / norms[j, None])
    return grad_r.T @ f, grad_r @ w


@dataclass(frozen=True)
class GaussStats:
    """
    Running mean/variance of the positive and negative similarity distributions.

    ``pos_weight`` / ``neg_weight`` record the weight with which the most recent
    batch entered each side (1 on the first update, 1 - beta afterwards, 0 when
    that side saw no similarities); ``pos_batch_mean`` / ``neg_batch_mean`` are
    the transient batch means. Losses differentiate only through that batch term.
    """
    mu_pos: float = 0.0
    var_pos: float = 0.0
    mu_neg: float = 0.0
    var_neg: float = 0.0
    beta: float = 0.99
    pos_initialized: bool = False
    neg_initialized: bool = False
    pos_weight: float = 0.0
    neg_weight: float = 0.0
    pos_batch_mean: float = 0.0
    neg_batch_mean: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValidationError(f"beta must be in [0, 1), got {self.beta}")
        if self.var_pos < 0 or self.var_neg < 0:
            raise ValidationError("variances must be nonnegative")

    @property
    def initialized(self) -> bool:
        return self.pos_initialized and self.neg_initialized

    @property
    def separated(self) -> bool:
        return self.initialized and self.mu_pos > self.mu_neg


@dataclass(frozen=True)
class SDConfig:
    """Margin and variance weight of the similarity distribution loss."""
    margin_m: float = 0.5
    lambda_var: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.margin_m <= 2.0:
            raise ValidationError("sd margin must be in (0, 2]")
        if self.lambda_var < 0:
            raise ValidationError("sd variance weight must be nonnegative")


def _side_update(mu: float, var: float, initialized: bool, beta: float,
                 sims: np.ndarray) -> Tuple[float, float, bool, float, float]:
    if sims.size == 0:
        return mu, var, initialized, 0.0, 0.0
    mu_b = float(np.mean(sims))
    var_b = float(np.mean((sims - mu_b) ** 2))
    if not initialized:
        return mu_b, var_b, True, 1.0, mu_b
    weight = 1.0 - beta
    return weight * mu_b + beta * mu, weight * var_b + beta * var, True, weight, mu_b


def update_gauss_stats(stats: GaussStats, pos_sims, neg_sims) -> GaussStats:
    """
    Momentum update of both sides:

        mu  <- (1 - beta) * mu_b  + beta * mu
        var <- (1 - beta) * var_b + beta * var

    with the batch (population) mean and variance. A side's first update
    adopts the batch statistics; an empty side is left unchanged.
    """
    pos = np.asarray(pos_sims, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_sims, dtype=np.float64).reshape(-1)
    mu_p, var_p, init_p, w_p, mb_p = _side_update(
        stats.mu_pos, stats.var_pos, stats.pos_initialized, stats.beta, pos)
    mu_n, var_n, init_n, w_n, mb_n = _side_update(
        stats.mu_neg, stats.var_neg, stats.neg_initialized, stats.beta, neg)
    return replace(stats, mu_pos=mu_p, var_pos=var_p, mu_neg=mu_n, var_neg=var_n,
                   pos_initialized=init_p, neg_initialized=init_n,
                   pos_weight=w_p, neg_weight=w_n,
                   pos_batch_mean=mb_p, neg_batch_mean=mb_n)


@dataclass(frozen=True, eq=False)
class SimilarityLossResult:
    loss: float
    grad_pos: np.ndarray
    grad_neg: np.ndarray
    empty_batch: bool = False


def _mean_grad(weight: float, n: int) -> float:
    return weight / n if n else 0.0


def sd_loss(stats: GaussStats, pos_sims, neg_sims, cfg: SDConfig) -> SimilarityLossResult:
    """
    Similarity distribution loss on the post-update running statistics:

        max(mu- - mu+ + m, 0) + lambda * (var+ + var-)

    ``stats`` must already include the current batch (see update_gauss_stats).
    """
    pos = np.asarray(pos_sims, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_sims, dtype=np.float64).reshape(-1)
    grad_pos = np.zeros_like(pos)
    grad_neg = np.zeros_like(neg)
    if pos.size + neg.size == 0 or not stats.initialized:
        return SimilarityLossResult(0.0, grad_pos, grad_neg, empty_batch=True)

    hinge = stats.mu_neg - stats.mu_pos + cfg.margin_m
    loss = max(hinge, 0.0) + cfg.lambda_var * (stats.var_pos + stats.var_neg)

    if pos.size:
        wp = stats.pos_weight
        grad_pos += cfg.lambda_var * wp * 2.0 * (pos - stats.pos_batch_mean) / pos.size
        if hinge > 0.0:
            grad_pos -= _mean_grad(wp, pos.size)
    if neg.size:
        wn = stats.neg_weight
        grad_neg += cfg.lambda_var * wn * 2.0 * (neg - stats.neg_batch_mean) / neg.size
        if hinge > 0.0:
            grad_neg += _mean_grad(wn, neg.size)
    return SimilarityLossResult(float(loss), grad_pos, grad_neg)


def _softplus(x):
    return np.logaddexp(0.0, x)


def local_ce_pair_loss(pos_sims, neg_sims,
                       scale: float = DEFAULT_CE_SCALE) -> SimilarityLossResult:
    """
    Per-pair binary cross-entropy: probability sigmoid(scale * s) against label 1
    for pseudo-positive pairs and 0 for pseudo-negative pairs, averaged over pairs.
    """
    pos = np.asarray(pos_sims, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_sims, dtype=np.float64).reshape(-1)
    n = pos.size + neg.size
    if n == 0:
        return SimilarityLossResult(0.0, pos.copy(), neg.copy(), empty_batch=True)
    loss = (np.sum(_softplus(-scale * pos)) + np.sum(_softplus(scale * neg))) / n
    grad_pos = -scale * expit(-scale * pos) / n
    grad_neg = scale * expit(scale * neg) / n
    return SimilarityLossResult(float(loss), grad_pos, grad_neg)


def global_ce_loss(stats: GaussStats, pos_sims=None, neg_sims=None,
                   scale: float = DEFAULT_CE_SCALE) -> SimilarityLossResult:
    """
    Cross-entropy on the running means: sigmoid(scale * mu+) against label 1 plus
    sigmoid(scale * mu-) against label 0. Gradients reach the current batch's
    similarities through its weight in the running means.
    """
    if not stats.initialized:
        raise ValidationError("global-CE needs initialized statistics on both sides")
    pos = np.zeros(0) if pos_sims is None else np.asarray(pos_sims, dtype=np.float64).ravel()
    neg = np.zeros(0) if neg_sims is None else np.asarray(neg_sims, dtype=np.float64).ravel()
    loss = float(_softplus(-scale * stats.mu_pos) + _softplus(scale * stats.mu_neg))
    d_mu_pos = -scale * float(expit(-scale * stats.mu_pos))
    d_mu_neg = scale * float(expit(scale * stats.mu_neg))
    grad_pos = np.full(pos.shape, d_mu_pos * _mean_grad(stats.pos_weight, pos.size))
    grad_neg = np.full(neg.shape, d_mu_neg * _mean_grad(stats.neg_weight, neg.size))
    return SimilarityLossResult(loss, grad_pos, grad_neg, empty_batch=pos.size + neg.size == 0)


SIMILARITY_VARIANTS = ("sd", "local_ce", "global_ce")


def similarity_objective(variant: str, stats: GaussStats, pos_sims, neg_sims,
                         sd_cfg: SDConfig,
                         ce_scale: float = DEFAULT_CE_SCALE) -> SimilarityLossResult:
    """Dispatch to the unlabeled half of the basis loss selected by ``variant``."""
    if variant == "sd":
        return sd_loss(stats, pos_sims, neg_sims, sd_cfg)
    if variant == "local_ce":
        return local_ce_pair_loss(pos_sims, neg_sims, ce_scale)
    if variant == "global_ce":
        if not stats.initialized:
            pos = np.asarray(pos_sims, dtype=np.float64).ravel()
            neg = np.asarray(neg_sims, dtype=np.float64).ravel()
            return SimilarityLossResult(0.0, np.zeros_like(pos), np.zeros_like(neg), True)
        return global_ce_loss(stats, pos_sims, neg_sims, ce_scale)
    raise ValidationError(f"unknown similarity loss variant {variant!r}")

