"""
Finite-difference verification of every analytic gradient in the package.

Each check draws random instances, differentiates randomly chosen coordinates with
central differences and compares them to the analytic gradient. Instances
that land within ``KINK_CLEARANCE`` of a hinge corner are redrawn, since the
subgradient there is not what a central difference measures.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np

from .basis_miner import BasisMatrix
from .embedding_model import EmbeddingParams, backward, embed, init_params
from .losses import (
    GaussStats, PairSet, RankingMargins, SDConfig, basis_ce_loss, batch_pair_similarities,
    contrastive_rank_loss, global_ce_loss, local_ce_pair_loss, pair_similarity_backward, sd_loss,
    update_gauss_stats,
)
from .numerics import finite_diff_gradient, relative_error
from .run_validator import RunValidation, ValidationResult

logger = logging.getLogger(__name__)

EPS = 1e-5
TOLERANCE = 1e-4
KINK_CLEARANCE = 1e-3
MAX_INSTANCES = 1000

# One instance: (point, scalar function, analytic gradient), or None to redraw
Instance = Tuple[np.ndarray, Callable[[np.ndarray], float], np.ndarray]


@dataclass
class GradientCheck:
    name: str
    max_error: float
    coordinates: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _random_labels(rng: np.random.Generator, n: int, classes: int) -> np.ndarray:
    labels = rng.integers(classes, size=n)
    labels[:classes] = np.arange(classes)
    return labels


def _ranking_instance(rng: np.random.Generator):
    margins = RankingMargins(0.3, 1.0)
    n, d = 8, 5
    f = rng.normal(scale=0.4, size=(n, d))
    pairs = PairSet.from_labels(_random_labels(rng, n, 3))
    for arr, margin in ((pairs.positive_pairs, margins.m_pos),
                        (pairs.negative_pairs, margins.m_neg)):
        dist = np.linalg.norm(f[arr[:, 0]] - f[arr[:, 1]], axis=1)
        if np.any(np.abs(dist - margin) < KINK_CLEARANCE):
            return None

    def fn(x):
        return contrastive_rank_loss(x, pairs, margins).loss
    return f, fn, contrastive_rank_loss(f, pairs, margins).grad_embeddings


def _ce_basis_instance(rng: np.random.Generator):
    w = rng.normal(size=(4, 6))
    f = rng.normal(size=(7, 6))
    y = _random_labels(rng, 7, 4)

    def fn(x):
        return basis_ce_loss(x, f, y).loss
    return w, fn, basis_ce_loss(w, f, y).grad_basis


def _ce_embedding_instance(rng: np.random.Generator):
    w = rng.normal(size=(4, 6))
    f = rng.normal(size=(7, 6))
    y = _random_labels(rng, 7, 4)

    def fn(x):
        return basis_ce_loss(w, x, y).loss
    return f, fn, basis_ce_loss(w, f, y).grad_embeddings


def _similarity_setup(rng: np.random.Generator):
    w = rng.normal(size=(5, 4))
    f = rng.normal(size=(6, 4))
    sims = batch_pair_similarities(w, f, _random_labels(rng, 6, 2))
    pairs = np.concatenate([sims.pos_pairs, sims.neg_pairs])
    g = rng.normal(size=len(pairs))
    return w, f, pairs, g


def _weighted_sims(w, f, pairs, g) -> float:
    u = f @ w.T
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    return float(np.sum(g * np.sum(u[pairs[:, 0]] * u[pairs[:, 1]], axis=1)))


def _projection_basis_instance(rng: np.random.Generator):
    w, f, pairs, g = _similarity_setup(rng)
    grad_w, _ = pair_similarity_backward(w, f, pairs, g)
    return w, (lambda x: _weighted_sims(x, f, pairs, g)), grad_w


def _projection_embedding_instance(rng: np.random.Generator):
    w, f, pairs, g = _similarity_setup(rng)
    _, grad_f = pair_similarity_backward(w, f, pairs, g)
    return f, (lambda x: _weighted_sims(w, x, pairs, g)), grad_f


def _prior_stats(rng: np.random.Generator) -> GaussStats:
    return GaussStats(mu_pos=float(rng.uniform(0.0, 0.6)), var_pos=float(rng.uniform(0, 0.05)),
                      mu_neg=float(rng.uniform(-0.4, 0.3)), var_neg=float(rng.uniform(0, 0.05)),
                      beta=float(rng.choice([0.0, 0.5, 0.9])),
                      pos_initialized=True, neg_initialized=True)


def _split(x: np.ndarray, n_pos: int):
    return x[:n_pos], x[n_pos:]


def _sd_instance(rng: np.random.Generator):
    prior = _prior_stats(rng)
    cfg = SDConfig(margin_m=0.5, lambda_var=0.25)
    pos = rng.uniform(-1, 1, size=5)
    neg = rng.uniform(-1, 1, size=7)
    x = np.concatenate([pos, neg])

    def fn(v):
        p, n = _split(v, pos.size)
        return sd_loss(update_gauss_stats(prior, p, n), p, n, cfg).loss
    stats = update_gauss_stats(prior, pos, neg)
    if abs(stats.mu_neg - stats.mu_pos + cfg.margin_m) < KINK_CLEARANCE:
        return None
    result = sd_loss(stats, pos, neg, cfg)
    return x, fn, np.concatenate([result.grad_pos, result.grad_neg])


def _local_ce_instance(rng: np.random.Generator):
    pos = rng.uniform(-1, 1, size=5)
    neg = rng.uniform(-1, 1, size=6)
    x = np.concatenate([pos, neg])

    def fn(v):
        p, n = _split(v, pos.size)
        return local_ce_pair_loss(p, n).loss
    result = local_ce_pair_loss(pos, neg)
    return x, fn, np.concatenate([result.grad_pos, result.grad_neg])


def _global_ce_instance(rng: np.random.Generator):
    prior = _prior_stats(rng)
    pos = rng.uniform(-1, 1, size=4)
    neg = rng.uniform(-1, 1, size=6)
    x = np.concatenate([pos, neg])

    def fn(v):
        p, n = _split(v, pos.size)
        return global_ce_loss(update_gauss_stats(prior, p, n), p, n).loss
    result = global_ce_loss(update_gauss_stats(prior, pos, neg), pos, neg)
    return x, fn, np.concatenate([result.grad_pos, result.grad_neg])


def _unflatten(template: EmbeddingParams, flat: np.ndarray) -> EmbeddingParams:
    weights = []
    biases = []
    offset = 0
    for w, b in zip(template.weights, template.biases):
        weights.append(flat[offset:offset + w.size].reshape(w.shape))
        offset += w.size
        biases.append(flat[offset:offset + b.size].copy())
        offset += b.size
    return EmbeddingParams(template.layer_dims, tuple(weights), tuple(biases),
                           template.normalize_output)


def _flatten(params: EmbeddingParams) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.reshape(-1))
        parts.append(b.reshape(-1))
    return np.concatenate(parts)


def _embedding_instance(rng: np.random.Generator):
    params = init_params(int(rng.integers(2 ** 31)), [5, 7, 4])
    # Nonzero biases keep ReLU units away from exact zero
    params = _unflatten(params, _flatten(params) + 0.1 * rng.normal(size=_flatten(params).size))
    x = rng.normal(size=(6, 5))
    g = rng.normal(size=(6, 4))
    pre = x @ params.weights[0].T + params.biases[0]
    if np.min(np.abs(pre)) < KINK_CLEARANCE:
        return None

    def fn(flat):
        return float(np.sum(g * embed(_unflatten(params, flat), x)))
    return _flatten(params), fn, backward(params, x, g).flat()


CHECKS: Dict[str, Callable[[np.random.Generator], object]] = {
    "ranking loss": _ranking_instance,
    "basis cross-entropy (basis)": _ce_basis_instance,
    "basis cross-entropy (embeddings)": _ce_embedding_instance,
    "projected similarity (basis)": _projection_basis_instance,
    "projected similarity (embeddings)": _projection_embedding_instance,
    "similarity distribution loss": _sd_instance,
    "local cross-entropy": _local_ce_instance,
    "global cross-entropy": _global_ce_instance,
    "embedding backward": _embedding_instance,
}


def check_gradient(name: str, make_instance, rng: np.random.Generator, coordinates: int,
                   per_instance: int = 10) -> GradientCheck:
    """Check ``coordinates`` gradient entries spread over random instances of one check."""
    done = 0
    worst = 0.0
    for _ in range(MAX_INSTANCES):
        if done >= coordinates:
            break
        instance = make_instance(rng)
        if instance is None:
            continue
        x, fn, analytic = instance
        count = min(per_instance, x.size, coordinates - done)
        coords = rng.choice(x.size, size=count, replace=False)
        numeric = finite_diff_gradient(fn, x, EPS, coords)
        err = relative_error(np.asarray(analytic).reshape(-1)[coords],
                             numeric.reshape(-1)[coords])
        worst = max(worst, err)
        done += count
    logger.debug("%s: max relative error %.3g over %d coordinates", name, worst, done)
    return GradientCheck(name, worst, done)


def run_gradcheck(seed: int = 0, coordinates: int = 100) -> RunValidation:
    """Run every check on at least ``coordinates`` gradient entries each."""
    rng = np.random.default_rng(seed)
    validation = RunValidation()
    for name, make_instance in CHECKS.items():
        result = check_gradient(name, make_instance, rng, coordinates)
        enough = result.coordinates >= coordinates
        validation.add_check(ValidationResult(
            passed=result.passed and enough,
            message=f"{name}: max relative error {result.max_error:.2e} "
                    f"over {result.coordinates} coordinates",
            severity="error" if not (result.passed and enough) else "info",
        ))
    return validation
