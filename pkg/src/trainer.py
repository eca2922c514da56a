"""
Pipeline orchestration.

Stages, in order:

1. ``train_teacher``: contrastive ranking loss on ground-truth pairs
2. ``generate_pseudo_labels``: k-means over teacher embeddings of the unlabeled pool
3. ``warmup_basis``: basis loss alone, embedding network frozen
4. ``train_student``: labeled ranking + lambda1 * mined ranking + lambda2 * basis loss
5. ``self_train``: rounds of 2-4 where each student becomes the next teacher

``run_folds`` trains one smaller student per class fold and concatenates them.

Every random draw comes from a generator derived from ``(config.seed, stream,
round)``, so a run is a pure function of its datasets and config.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .basis_miner import (
    BasisMatrix, init_basis, init_basis_from_centers, mine_pairs, thresholds_from_stats,
)
from .config_manager import TrainConfig
from .datasets import Dataset
from .embedding_model import (
    EmbeddingGrads, EmbeddingParams, backward, embed, forward, init_params, live_rows,
    momentum_step, params_fingerprint,
)
from .error_handler import ConfigError, ShapeMismatchError, ValidationError
from .losses import (
    GaussStats, PairSet, PairSimilarities, balanced_rank_loss, basis_ce_loss,
    batch_pair_similarities, contrastive_rank_loss, pair_similarity_backward,
    similarity_objective, update_gauss_stats,
)
from .numerics import as_matrix
from .pseudo_labeler import PseudoLabeledSet, assign, kmeans_fit
from .retrieval_eval import DEFAULT_KS, RetrievalReport, evaluate_leave_one_out

logger = logging.getLogger(__name__)

# Random stream ids
_INIT_STREAM = 1
_LABELED_STREAM = 2
_UNLABELED_STREAM = 3
_WARMUP_STREAM = 4
_BASIS_STREAM = 5
_KMEANS_STREAM = 6
_FOLD_STREAM = 7


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def derived_seed(seed: int, *keys: int) -> int:
    """A 32-bit seed for one named stream of a run."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def pseudo_label_seed(seed: int, round_index: int = 0) -> int:
    """k-means seed of one self-training round."""
    return derived_seed(seed, _KMEANS_STREAM, round_index)


def _features(data) -> np.ndarray:
    # Only features are read; labels of the unlabeled pool never reach training
    return as_matrix(getattr(data, 'features', data))


def _class_index(labels) -> Tuple[np.ndarray, np.ndarray]:
    classes, index = np.unique(np.asarray(labels, dtype=np.int64), return_inverse=True)
    return classes, index.astype(np.int64)


# --------------------------------------------------------------------------
# History records
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    """Loss components of one optimization step."""
    phase: str
    round: int
    epoch: int
    step: int
    rank_labeled: float
    rank_unlabeled: float = 0.0
    basis_ce: float = 0.0
    basis_similarity: float = 0.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    total: float = 0.0
    mined_positives: int = 0
    mined_negatives: int = 0
    separated: bool = False

    def recomputed_total(self) -> float:
        return (self.rank_labeled + self.lambda1 * self.rank_unlabeled
                + self.lambda2 * (self.basis_ce + self.basis_similarity))


@dataclass(frozen=True)
class EpochRecord:
    phase: str
    round: int
    epoch: int
    mean_loss: float
    steps: int
    skipped_steps: int = 0
    mu_pos: Optional[float] = None
    mu_neg: Optional[float] = None
    dead_rows: int = 0

    def to_dict(self) -> dict:
        return {
            'phase': self.phase,
            'round': self.round,
            'epoch': self.epoch,
            'mean_loss': self.mean_loss,
            'steps': self.steps,
            'skipped_steps': self.skipped_steps,
            'mu_pos': self.mu_pos,
            'mu_neg': self.mu_neg,
            'dead_rows': self.dead_rows,
        }


@dataclass(frozen=True)
class RoundRecord:
    """Provenance and held-out metrics of one self-training round."""
    round: int
    teacher_id: str
    student_id: str
    pseudo_label_source: str
    clusters: int
    inertia: float
    warmup_loss: Optional[float] = None
    dead_rows: int = 0
    teacher_metrics: Optional[RetrievalReport] = None
    student_metrics: Optional[RetrievalReport] = None

    def to_dict(self) -> dict:
        return {
            'round': self.round,
            'teacher_id': self.teacher_id,
            'student_id': self.student_id,
            'pseudo_label_source': self.pseudo_label_source,
            'clusters': self.clusters,
            'inertia': self.inertia,
            'warmup_loss': self.warmup_loss,
            'dead_rows': self.dead_rows,
            'teacher_metrics': self.teacher_metrics.to_dict() if self.teacher_metrics else None,
            'student_metrics': self.student_metrics.to_dict() if self.student_metrics else None,
        }


class TrainingHistory:
    """Append-only record of every phase of a run."""

    def __init__(self):
        self._steps: List[StepRecord] = []
        self._epochs: List[EpochRecord] = []
        self._rounds: List[RoundRecord] = []

    @property
    def steps(self) -> Tuple[StepRecord, ...]:
        return tuple(self._steps)

    @property
    def epochs(self) -> Tuple[EpochRecord, ...]:
        return tuple(self._epochs)

    @property
    def rounds(self) -> Tuple[RoundRecord, ...]:
        return tuple(self._rounds)

    def add_step(self, record: StepRecord):
        self._steps.append(record)

    def add_epoch(self, record: EpochRecord):
        self._epochs.append(record)

    def add_round(self, record: RoundRecord):
        self._rounds.append(record)

    def epochs_of(self, phase: str) -> List[EpochRecord]:
        return [e for e in self._epochs if e.phase == phase]

    def to_dict(self) -> dict:
        return {
            'epochs': [e.to_dict() for e in self._epochs],
            'rounds': [r.to_dict() for r in self._rounds],
        }


@dataclass
class PipelineState:
    """Teacher, student and basis after ``self_train``; the student is the retrieval model."""
    teacher: EmbeddingParams
    student: EmbeddingParams
    basis: BasisMatrix
    stats: GaussStats
    round: int
    history: TrainingHistory = field(default_factory=TrainingHistory)
    round_students: List[EmbeddingParams] = field(default_factory=list)


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

def labeled_batches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """One shuffled pass split into count // batch_size near-equal batches (at least one)."""
    order = rng.permutation(count)
    return np.array_split(order, max(1, count // batch_size))


class SampleStream:
    """Endless stream of equal-size index batches, reshuffled on every pass."""

    def __init__(self, count: int, batch_size: int, rng: np.random.Generator):
        if count < 1:
            raise ValidationError("cannot stream from an empty set")
        self.count = count
        self.batch_size = min(batch_size, count)
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.count)
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def sample_labeled_pairs(labels, rng: np.random.Generator) -> PairSet:
    """For each anchor, one random same-class and one random different-class partner."""
    labels = np.asarray(labels)
    positives = []
    negatives = []
    for anchor in range(labels.shape[0]):
        same = np.flatnonzero(labels == labels[anchor])
        same = same[same != anchor]
        other = np.flatnonzero(labels != labels[anchor])
        if same.size:
            positives.append((anchor, int(rng.choice(same))))
        if other.size:
            negatives.append((anchor, int(rng.choice(other))))
    return PairSet(np.array(positives, dtype=np.int64).reshape(-1, 2),
                   np.array(negatives, dtype=np.int64).reshape(-1, 2))


def _warn_label_coverage(labels: np.ndarray):
    classes, counts = np.unique(labels, return_counts=True)
    for c, n in zip(classes, counts):
        if n < 2:
            logger.warning("class %d has a single sample and contributes no positive pairs", c)
    if classes.size < 2:
        logger.warning("only one labeled class: negative pairs are starved")


class _Optimizer:
    """Momentum SGD over the embedding network."""

    def __init__(self, params: EmbeddingParams, config: TrainConfig):
        self.params = params
        self.velocity = EmbeddingGrads.zeros_like(params)
        self.learning_rate = config.learning_rate
        self.momentum = config.momentum

    def step(self, grads: EmbeddingGrads):
        self.params, self.velocity = momentum_step(
            self.params, grads, self.velocity, self.learning_rate, self.momentum)


def _progress(iterable, desc: str, enabled: bool):
    return tqdm(iterable, desc=desc, disable=not enabled, leave=False)


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def _drop_dead(params: EmbeddingParams, x: np.ndarray, *aligned: np.ndarray):
    """
    Rows of ``x`` (and of each array aligned with it) that the network can
    embed, and how many were dropped.
    """
    live = live_rows(params, x)
    dead = int(live.size - np.count_nonzero(live))
    if not dead:
        return (x, *aligned), 0
    return (x[live], *(a[live] for a in aligned)), dead


def _warn_dead(dead: int, where: str):
    if dead:
        logger.warning("%s: left out %d rows with a dead embedding", where, dead)


# --------------------------------------------------------------------------
# Teacher
# --------------------------------------------------------------------------

def _initial_params(labeled: Dataset, config: TrainConfig,
                    init_from: Optional[EmbeddingParams]) -> EmbeddingParams:
    if init_from is None:
        return init_params(derived_seed(config.seed, _INIT_STREAM), config.layer_dims(labeled.dim))
    if init_from.input_dim != labeled.dim:
        raise ShapeMismatchError(
            f"network expects {init_from.input_dim} features, data has {labeled.dim}")
    return init_from


def student_start(labeled: Dataset, config: TrainConfig, teacher: EmbeddingParams,
                  init_from: Optional[EmbeddingParams] = None) -> EmbeddingParams:
    """
    Network the student is trained from.

    ``student_init = shared`` gives the network the teacher itself started
    from (``init_from``, or the seeded initialization); ``teacher`` continues
    from the teacher's weights.
    """
    if config.student_init == "teacher":
        return teacher
    return _initial_params(labeled, config, init_from)


def train_teacher(labeled: Dataset, config: TrainConfig,
                  init_from: Optional[EmbeddingParams] = None,
                  history: Optional[TrainingHistory] = None, progress: bool = False,
                  round_index: int = 0) -> EmbeddingParams:
    """
    Fine-tune the teacher with the contrastive ranking loss on ground-truth pairs.

    Args:
        labeled: Labeled dataset (rows marked ``?`` are ignored)
        config: Training configuration
        init_from: Starting network; a fresh seeded network when omitted
        history: Receives one EpochRecord per epoch
        progress: Show a progress bar
        round_index: Selects the random streams

    Returns:
        The trained teacher network
    """
    labeled = labeled.labeled_part()
    if len(labeled) < 2:
        raise ValidationError("teacher training needs at least 2 labeled samples")
    params = _initial_params(labeled, config, init_from)
    _warn_label_coverage(labeled.labels)

    rng = _rng(config.seed, _LABELED_STREAM, round_index)
    opt = _Optimizer(params, config)
    for epoch in _progress(range(config.epochs_teacher), "teacher", progress):
        losses = []
        skipped = 0
        dead_rows = 0
        for batch in labeled_batches(len(labeled), config.batch_size, rng):
            (x, y), dead = _drop_dead(opt.params, labeled.features[batch], labeled.labels[batch])
            dead_rows += dead
            pairs = sample_labeled_pairs(y, rng)
            result = contrastive_rank_loss(forward(opt.params, x), pairs, config.margins)
            if result.starved:
                skipped += 1
                continue
            opt.step(backward(opt.params, x, result.grad_embeddings))
            losses.append(result.loss)
        _warn_dead(dead_rows, f"teacher epoch {epoch}")
        if history is not None:
            history.add_epoch(EpochRecord("teacher", round_index, epoch, _mean(losses),
                                          len(losses), skipped, dead_rows=dead_rows))
        logger.debug("teacher epoch %d: loss %.6f", epoch, _mean(losses))
    return opt.params


# --------------------------------------------------------------------------
# Pseudo labels
# --------------------------------------------------------------------------

def generate_pseudo_labels(teacher: EmbeddingParams, unlabeled, k: int, seed: int,
                           max_iter: int = 100, restarts: int = 1) -> PseudoLabeledSet:
    """
    Embed the unlabeled pool with the teacher, cluster it, and attach cluster ids.

    ``source_teacher`` records the teacher's checkpoint fingerprint. Pool rows
    the teacher cannot embed are left out and listed by ``source_rows``.
    """
    pool = _features(unlabeled)
    rows = np.arange(pool.shape[0])
    (samples, rows), dead = _drop_dead(teacher, pool, rows)
    _warn_dead(dead, "pseudo-labeling")
    if samples.shape[0] < k:
        raise ValidationError(f"unlabeled pool of {samples.shape[0]} is smaller than k={k}")
    embeddings = embed(teacher, samples)
    model = kmeans_fit(embeddings, k, max_iter=max_iter, seed=seed, restarts=restarts)
    labels = assign(model, embeddings)
    logger.info("pseudo-labeled %d samples into %d clusters (inertia %.4f)",
                samples.shape[0], k, model.inertia)
    return PseudoLabeledSet(samples, labels, params_fingerprint(teacher), k, model,
                            rows if dead else None)


# --------------------------------------------------------------------------
# Basis
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BasisLossResult:
    """
    Basis loss: cross-entropy on labeled embeddings plus the similarity loss of
    the unlabeled batch, with gradients for the basis and both embedding sets.
    """
    loss: float
    ce_loss: float
    similarity_loss: float
    grad_basis: np.ndarray
    grad_labeled: np.ndarray
    grad_unlabeled: np.ndarray
    stats: GaussStats
    similarities: Optional[PairSimilarities] = None
    empty_batch: bool = False


def basis_loss(basis: BasisMatrix, stats: GaussStats, labeled_embeddings, labeled_classes,
               unlabeled_embeddings, pseudo_labels, config: TrainConfig) -> BasisLossResult:
    """
    Evaluate the basis loss on one labeled and one unlabeled batch.

    ``labeled_classes`` are row indices into the basis. The statistics are
    updated with the batch before the similarity loss is taken; the returned
    result carries the updated statistics. An unlabeled batch with fewer than
    two rows contributes only the cross-entropy term.
    """
    ce = basis_ce_loss(basis, labeled_embeddings, labeled_classes)
    f_u = as_matrix(unlabeled_embeddings, cols=basis.d)
    grad_u = np.zeros_like(f_u)
    if f_u.shape[0] < 2:
        return BasisLossResult(ce.loss, ce.loss, 0.0, ce.grad_basis, ce.grad_embeddings,
                               grad_u, stats, None, True)

    sims = batch_pair_similarities(basis, f_u, pseudo_labels)
    new_stats = update_gauss_stats(stats, sims.pos_sims, sims.neg_sims)
    sim = similarity_objective(config.sd_variant, new_stats, sims.pos_sims, sims.neg_sims,
                               config.sd_config, config.ce_scale)
    pairs = np.concatenate([sims.pos_pairs, sims.neg_pairs])
    grads = np.concatenate([sim.grad_pos, sim.grad_neg])
    grad_w, grad_u = pair_similarity_backward(basis, f_u, pairs, grads)
    return BasisLossResult(ce.loss + sim.loss, ce.loss, sim.loss, ce.grad_basis + grad_w,
                           ce.grad_embeddings, grad_u, new_stats, sims, sim.empty_batch)


def initial_basis(network: EmbeddingParams, labeled: Dataset, config: TrainConfig,
                  round_index: int = 0) -> BasisMatrix:
    """Basis sized to the labeled classes (or ``basis_count``), initialized per ``basis_init``."""
    labeled = labeled.labeled_part()
    classes, index = _class_index(labeled.labels)
    k_b = config.basis_count or classes.size
    if k_b < classes.size:
        raise ConfigError(f"basis_count {k_b} is below the {classes.size} labeled classes")
    seed = derived_seed(config.seed, _BASIS_STREAM, round_index)
    if config.basis_init == "random":
        return init_basis(seed, k_b, network.embedding_dim)
    (features, index), dead = _drop_dead(network, labeled.features, index)
    _warn_dead(dead, "basis initialization")
    return init_basis_from_centers(embed(network, features), index, k_b, seed)


@dataclass(frozen=True, eq=False)
class BasisWarmup:
    basis: BasisMatrix
    stats: GaussStats
    losses: Tuple[float, ...] = ()
    dead_rows: int = 0


def warmup_basis(student: EmbeddingParams, basis: BasisMatrix, labeled: Dataset,
                 pseudo_labeled: PseudoLabeledSet, iters: int, config: TrainConfig,
                 stats: Optional[GaussStats] = None, round_index: int = 0) -> BasisWarmup:
    """
    Optimize the basis loss alone for ``iters`` steps with the network frozen.

    Samples the frozen network cannot embed are left out and counted.
    """
    if iters < 0:
        raise ValidationError("warm-up iterations must be >= 0")
    if stats is None:
        stats = GaussStats(beta=config.beta)
    if iters == 0:
        return BasisWarmup(basis, stats)

    labeled = labeled.labeled_part()
    _, class_index = _class_index(labeled.labels)
    (x_l, class_index), dead_l = _drop_dead(student, labeled.features, class_index)
    (x_u, p_u), dead_u = _drop_dead(student, as_matrix(pseudo_labeled.samples, labeled.dim),
                                    pseudo_labeled.pseudo_labels)
    _warn_dead(dead_l + dead_u, "basis warm-up")
    f_l = embed(student, x_l)
    f_u = embed(student, x_u) if len(x_u) else np.zeros((0, student.embedding_dim))
    lab_stream = SampleStream(len(x_l), config.batch_size,
                              _rng(config.seed, _WARMUP_STREAM, round_index, 0))
    unl_stream = None
    if len(x_u) >= 2:
        unl_stream = SampleStream(len(x_u), config.batch_size,
                                  _rng(config.seed, _WARMUP_STREAM, round_index, 1))

    losses = []
    for _ in range(iters):
        li = lab_stream.next_batch()
        ui = unl_stream.next_batch() if unl_stream else np.zeros(0, dtype=np.int64)
        result = basis_loss(basis, stats, f_l[li], class_index[li], f_u[ui], p_u[ui], config)
        basis = basis.stepped(result.grad_basis, config.learning_rate)
        stats = result.stats
        losses.append(result.loss)
    logger.info("basis warm-up: loss %.6f -> %.6f, mu+=%.4f mu-=%.4f",
                losses[0], losses[-1], stats.mu_pos, stats.mu_neg)
    return BasisWarmup(basis, stats, tuple(losses), dead_l + dead_u)


# --------------------------------------------------------------------------
# Student
# --------------------------------------------------------------------------

def uses_basis(config: TrainConfig) -> bool:
    """
    Whether student training needs the basis at all: for its loss (lambda2 > 0)
    or, in ``basis_mining`` mode, for mining pairs that are weighted in.
    """
    if config.student_mode == "pseudo_label":
        return False
    return config.lambda2 > 0 or (config.student_mode == "basis_mining" and config.lambda1 > 0)


def _unlabeled_pairs(config: TrainConfig, basis: BasisMatrix, stats: GaussStats,
                     f_u: np.ndarray, pseudo_labels: np.ndarray) -> Optional[PairSet]:
    if config.student_mode != "basis_mining":
        return PairSet.from_labels(pseudo_labels)
    if not stats.separated:
        return None
    thresholds = thresholds_from_stats(stats, config.threshold_std_scale)
    return mine_pairs(basis, f_u, thresholds, config.pair_cap, stats,
                      pseudo_labels).as_pair_set()


def train_student(labeled: Dataset, pseudo_labeled: PseudoLabeledSet, config: TrainConfig,
                  init_from: EmbeddingParams, basis: Optional[BasisMatrix] = None,
                  stats: Optional[GaussStats] = None,
                  history: Optional[TrainingHistory] = None, progress: bool = False,
                  round_index: int = 0) -> Tuple[EmbeddingParams, BasisMatrix, GaussStats]:
    """
    Jointly train the student network and the basis.

    Each step pairs one labeled batch with one unlabeled batch and minimizes

        rank(labeled) + lambda1 * rank(unlabeled pairs) + lambda2 * basis loss

    The unlabeled pairs depend on ``student_mode``: all pseudo-label pairs
    (``pseudo_label`` and ``basis``) or the pseudo-label pairs the basis
    confirms (``basis_mining``); their ranking loss weighs positives and
    negatives equally. Mining is skipped while mu+ <= mu-. In ``pseudo_label``
    mode, and whenever nothing weighted depends on it, the basis is neither
    warmed up nor trained.

    Without ``basis`` the basis is initialized from ``init_from`` and warmed up
    first. Rows the network cannot embed are left out of their batch.

    Returns:
        (student, basis, stats)
    """
    labeled = labeled.labeled_part()
    if len(labeled) < 2:
        raise ValidationError("student training needs at least 2 labeled samples")
    if config.lambda1 > 0 and len(pseudo_labeled) == 0:
        raise ValidationError("pseudo-labeled set is empty but lambda1 > 0")
    if len(pseudo_labeled) and pseudo_labeled.samples.shape[1] != labeled.dim:
        raise ShapeMismatchError("labeled and unlabeled feature dims differ")
    _initial_params(labeled, config, init_from)
    _, class_index = _class_index(labeled.labels)
    use_basis = uses_basis(config)
    if stats is None:
        stats = GaussStats(beta=config.beta)
    if basis is None:
        basis = initial_basis(init_from, labeled, config, round_index)
        if use_basis:
            warm = warmup_basis(init_from, basis, labeled, pseudo_labeled,
                                config.basis_warmup_iters, config, stats, round_index)
            basis, stats = warm.basis, warm.stats
            if history is not None and warm.losses:
                history.add_epoch(EpochRecord("warmup", round_index, 0, _mean(warm.losses),
                                              len(warm.losses), 0, stats.mu_pos, stats.mu_neg,
                                              warm.dead_rows))
    if basis.d != init_from.embedding_dim:
        raise ShapeMismatchError(f"basis dim {basis.d} != embedding dim {init_from.embedding_dim}")

    lam1, lam2 = config.lambda1, config.lambda2
    pool = as_matrix(pseudo_labeled.samples, labeled.dim)
    rng = _rng(config.seed, _LABELED_STREAM, round_index)
    unl_stream = None
    if len(pseudo_labeled) >= 2:
        unl_stream = SampleStream(len(pseudo_labeled), config.batch_size,
                                  _rng(config.seed, _UNLABELED_STREAM, round_index))
    opt = _Optimizer(init_from, config)
    step = 0
    for epoch in _progress(range(config.epochs_student), "student", progress):
        totals = []
        skipped = 0
        separated_steps = 0
        dead_rows = 0
        for batch in labeled_batches(len(labeled), config.batch_size, rng):
            (x_l, y_l, c_l), dead = _drop_dead(opt.params, labeled.features[batch],
                                               labeled.labels[batch], class_index[batch])
            dead_rows += dead
            pairs_l = sample_labeled_pairs(y_l, rng)
            f_l = forward(opt.params, x_l).embeddings
            rank_l = contrastive_rank_loss(f_l, pairs_l, config.margins)
            grad_l = rank_l.grad_embeddings.copy()

            ui = unl_stream.next_batch() if unl_stream is not None else np.zeros(0, dtype=np.int64)
            (x_u, p_u), dead = _drop_dead(opt.params, pool[ui], pseudo_labeled.pseudo_labels[ui])
            dead_rows += dead
            f_u = forward(opt.params, x_u).embeddings if len(x_u) else \
                np.zeros((0, opt.params.embedding_dim))
            grad_u = np.zeros_like(f_u)
            unlabeled_active = False
            grad_basis = None
            ce_loss = sim_loss = rank_u_loss = 0.0
            mined_pos = mined_neg = 0

            if use_basis:
                result = basis_loss(basis, stats, f_l, c_l, f_u, p_u, config)
                stats = result.stats
                ce_loss, sim_loss = result.ce_loss, result.similarity_loss
                if lam2 > 0:
                    grad_l += lam2 * result.grad_labeled
                    grad_u += lam2 * result.grad_unlabeled
                    grad_basis = lam2 * result.grad_basis
                    unlabeled_active = f_u.shape[0] > 0

            separated = stats.separated
            separated_steps += int(separated)
            if f_u.shape[0] >= 2:
                pairs_u = _unlabeled_pairs(config, basis, stats, f_u, p_u)
                if pairs_u is not None:
                    mined_pos = len(pairs_u.positive_pairs)
                    mined_neg = len(pairs_u.negative_pairs)
                    rank_u = balanced_rank_loss(f_u, pairs_u, config.margins)
                    if not rank_u.starved:
                        rank_u_loss = rank_u.loss
                        if lam1 > 0:
                            grad_u += lam1 * rank_u.grad_embeddings
                            unlabeled_active = True

            total = rank_l.loss + lam1 * rank_u_loss + lam2 * (ce_loss + sim_loss)
            record = StepRecord("student", round_index, epoch, step, rank_l.loss, rank_u_loss,
                                ce_loss, sim_loss, lam1, lam2, total, mined_pos, mined_neg,
                                separated)
            step += 1
            if history is not None:
                history.add_step(record)

            if rank_l.starved and not unlabeled_active and grad_basis is None:
                skipped += 1
                continue
            grads = backward(opt.params, x_l, grad_l)
            if unlabeled_active:
                grads = grads + backward(opt.params, x_u, grad_u)
            opt.step(grads)
            if grad_basis is not None:
                basis = basis.stepped(grad_basis, config.learning_rate)
            totals.append(total)

        if config.student_mode == "basis_mining" and use_basis and unl_stream is not None and \
                totals and separated_steps == 0:
            logger.warning("statistics not separated for all of epoch %d "
                           "(mu+=%.4f, mu-=%.4f); mined-pair term skipped",
                           epoch, stats.mu_pos, stats.mu_neg)
        _warn_dead(dead_rows, f"student epoch {epoch}")
        if history is not None:
            history.add_epoch(EpochRecord("student", round_index, epoch, _mean(totals),
                                          len(totals), skipped, stats.mu_pos, stats.mu_neg,
                                          dead_rows))
        logger.debug("student epoch %d: loss %.6f", epoch, _mean(totals))
    return opt.params, basis, stats


# --------------------------------------------------------------------------
# Self-training and folds
# --------------------------------------------------------------------------

def held_out_report(params: EmbeddingParams, evaluation: Dataset,
                    ks: Sequence[int] = DEFAULT_KS) -> RetrievalReport:
    """Leave-one-out retrieval metrics of ``params`` on a labeled evaluation set."""
    part = evaluation.labeled_part()
    return evaluate_leave_one_out(embed(params, part.features), part.labels, ks)


def self_train(labeled: Dataset, unlabeled, config: TrainConfig,
               evaluation: Optional[Dataset] = None,
               init_from: Optional[EmbeddingParams] = None,
               progress: bool = False) -> PipelineState:
    """
    Train a teacher, then alternate pseudo-labeling and student training for
    ``self_train_rounds`` rounds, each student becoming the next teacher.

    Args:
        labeled: Labeled dataset
        unlabeled: Unlabeled pool (Dataset or feature matrix; labels are never read)
        config: Training configuration
        evaluation: Optional labeled held-out set scored after every round
        init_from: Starting network for the first teacher (and, with
            ``student_init = shared``, for every student)

    Returns:
        PipelineState whose ``student`` is the final retrieval model
    """
    config.validate()
    pool = _features(unlabeled)
    history = TrainingHistory()
    start = _initial_params(labeled.labeled_part(), config, init_from)
    teacher = train_teacher(labeled, config, start, history, progress)
    student = teacher
    basis: Optional[BasisMatrix] = None
    round_students: List[EmbeddingParams] = []
    stats = GaussStats(beta=config.beta)

    for r in range(config.self_train_rounds):
        if r > 0:
            teacher = student
        pseudo = generate_pseudo_labels(
            teacher, pool, config.clusters, pseudo_label_seed(config.seed, r),
            config.kmeans_max_iter, config.kmeans_restarts)
        init = student_start(labeled, config, teacher, start)
        student, basis, stats = train_student(labeled, pseudo, config, init,
                                              history=history, progress=progress,
                                              round_index=r)
        warmup = [e for e in history.epochs_of("warmup") if e.round == r]
        record = RoundRecord(
            round=r,
            teacher_id=params_fingerprint(teacher),
            student_id=params_fingerprint(student),
            pseudo_label_source=pseudo.source_teacher,
            clusters=pseudo.k,
            inertia=pseudo.model.inertia if pseudo.model else 0.0,
            warmup_loss=warmup[0].mean_loss if warmup else None,
            dead_rows=0 if pseudo.source_rows is None else len(pool) - len(pseudo),
            teacher_metrics=held_out_report(teacher, evaluation) if evaluation else None,
            student_metrics=held_out_report(student, evaluation) if evaluation else None,
        )
        history.add_round(record)
        round_students.append(student)
        if record.student_metrics is not None:
            logger.info("round %d: teacher MAP@R %.4f, student MAP@R %.4f", r,
                        record.teacher_metrics.map_at_r, record.student_metrics.map_at_r)
        else:
            logger.info("round %d complete (student %s)", r, record.student_id)

    assert basis is not None
    return PipelineState(teacher, student, basis, stats, config.self_train_rounds, history,
                         round_students)


@dataclass(frozen=True, eq=False)
class FoldEnsemble:
    """
    Per-fold students whose unit embeddings are concatenated and scaled by
    1/sqrt(folds), giving unit-norm evaluation embeddings.
    """
    members: Tuple[EmbeddingParams, ...]
    held_out_classes: Tuple[np.ndarray, ...] = ()
    states: Tuple[PipelineState, ...] = ()

    @property
    def embedding_dim(self) -> int:
        return sum(m.embedding_dim for m in self.members)

    def embed(self, inputs) -> np.ndarray:
        parts = [embed(member, inputs) for member in self.members]
        return np.concatenate(parts, axis=1) / np.sqrt(len(self.members))


def run_folds(labeled: Dataset, unlabeled, config: TrainConfig,
              evaluation: Optional[Dataset] = None, progress: bool = False) -> FoldEnsemble:
    """
    Split the labeled classes into ``folds`` disjoint class folds and self-train
    one student of width embedding_dim / folds per fold, fold f training on the
    classes outside fold f. Each fold's student initializes the next fold's
    teacher. ``folds == 1`` is plain self-training on all classes.
    """
    config.validate()
    folds = config.folds
    if config.embedding_dim % folds:
        raise ConfigError(f"embedding_dim {config.embedding_dim} is not divisible by {folds}")
    labeled = labeled.labeled_part()
    fold_config = config.replace(embedding_dim=config.embedding_dim // folds, folds=1)
    classes = labeled.classes()
    if folds > 1 and classes.size < 2 * folds:
        raise ValidationError(
            f"{classes.size} labeled classes cannot form {folds} folds of training classes")

    members = []
    held = []
    states = []
    previous: Optional[EmbeddingParams] = None
    for f in range(folds):
        if folds == 1:
            held_out = np.zeros(0, dtype=np.int64)
            cfg = fold_config
        else:
            held_out = classes[f::folds]
            cfg = fold_config.replace(seed=derived_seed(config.seed, _FOLD_STREAM, f))
        train_set = labeled.select_classes(np.setdiff1d(classes, held_out))
        logger.info("fold %d/%d: training on %d classes", f + 1, folds, train_set.classes().size)
        state = self_train(train_set, unlabeled, cfg, evaluation, previous, progress)
        previous = state.student
        members.append(state.student)
        held.append(held_out)
        states.append(state)
    return FoldEnsemble(tuple(members), tuple(held), tuple(states))


@dataclass(frozen=True)
class SweepPoint:
    multiplier: float
    clusters: int
    report: RetrievalReport


def sweep_clusters(labeled: Dataset, unlabeled, evaluation: Dataset, config: TrainConfig,
                   multipliers: Sequence[float] = (0.5, 1.0, 1.5, 2.0)) -> List[SweepPoint]:
    """Self-train once per k = round(multiplier * config.clusters) and score the students."""
    points = []
    for m in multipliers:
        k = max(1, int(np.floor(m * config.clusters + 0.5)))
        state = self_train(labeled, unlabeled, config.replace(clusters=k), evaluation)
        report = held_out_report(state.student, evaluation)
        logger.info("clusters=%d: MAP@R %.4f", k, report.map_at_r)
        points.append(SweepPoint(float(m), k, report))
    return points


def round_metrics(history: TrainingHistory) -> Dict[int, Dict[str, float]]:
    """MAP@R of teacher and student per round, for rounds that were evaluated."""
    out = {}
    for record in history.rounds:
        if record.student_metrics is not None and record.teacher_metrics is not None:
            out[record.round] = {'teacher': record.teacher_metrics.map_at_r,
                                 'student': record.student_metrics.map_at_r}
    return out
