"""
Basis-vector representation and high-confidence pair mining.

A basis matrix W_a (k_b x d) projects an embedding f to r = W_a f. Pairs of
unlabeled samples are scored by the cosine of their projections; pairs at or
above T1 become positives and pairs at or below T2 negatives, with T1/T2
derived from the running Gaussian statistics. Given pseudo labels, only pairs
the labels agree with are candidates.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .error_handler import FormatError, NotSeparatedError, ShapeMismatchError, ValidationError
from .losses import GaussStats, PairSet, scored_pairs
from .numerics import as_matrix, as_vector
from .text_format import ContainerReader, format_matrix, read_text, write_text

logger = logging.getLogger(__name__)

BASIS_MAGIC = "slade-basis"


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    """k_b learnable basis vectors of dimension d, stored as rows."""
    values: np.ndarray

    def __post_init__(self):
        values = as_matrix(self.values)
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"basis must be non-empty, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def k_b(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def stepped(self, grad: np.ndarray, learning_rate: float) -> "BasisMatrix":
        """Gradient step, returning a new basis."""
        if grad.shape != self.values.shape:
            raise ShapeMismatchError("basis gradient shape mismatch")
        return BasisMatrix(self.values - learning_rate * grad)


@dataclass(frozen=True)
class MiningThresholds:
    """Positive (t1) and negative (t2) acceptance similarities, t1 > t2."""
    t1: float
    t2: float

    def __post_init__(self):
        if not self.t1 > self.t2:
            raise NotSeparatedError(details=f"t1={self.t1} t2={self.t2}")


@dataclass(frozen=True, eq=False)
class MinedPairs:
    """Pairs selected by the thresholds, with the similarities that selected them."""
    positives: np.ndarray
    negatives: np.ndarray
    pos_sims: np.ndarray
    neg_sims: np.ndarray
    thresholds: MiningThresholds
    stats_snapshot: Optional[GaussStats] = None
    degenerate_pairs: int = 0

    def as_pair_set(self) -> PairSet:
        return PairSet(self.positives, self.negatives)


def init_basis(seed: int, k_b: int, d: int) -> BasisMatrix:
    """Random basis with N(0, 1/d) entries."""
    if k_b < 1 or d < 1:
        raise ValidationError(f"invalid basis shape {k_b}x{d}")
    rng = np.random.default_rng(seed)
    return BasisMatrix(rng.standard_normal((k_b, d)) / np.sqrt(d))


def init_basis_from_centers(embeddings, labels, k_b: int, seed: int) -> BasisMatrix:
    """
    Basis whose first rows are the mean embeddings of each labeled class
    (row c for class c); remaining rows are random.
    """
    f = as_matrix(getattr(embeddings, 'embeddings', embeddings))
    labels = np.asarray(labels, dtype=np.int64)
    basis = init_basis(seed, k_b, f.shape[1]).values.copy()
    for c in np.unique(labels):
        if c >= k_b:
            raise ValidationError(f"class id {c} needs at least {c + 1} basis vectors")
        basis[c] = f[labels == c].mean(axis=0)
    return BasisMatrix(basis)


def project(basis: BasisMatrix, f) -> np.ndarray:
    """Feature representation r = W_a f (r_i = a_i . f)."""
    f = as_vector(f)
    if f.shape[0] != basis.d:
        raise ShapeMismatchError(f"vector dim {f.shape[0]} != basis dim {basis.d}")
    return basis.values @ f


def thresholds_from_stats(stats: GaussStats, std_scale: float = 0.0) -> MiningThresholds:
    """
    T1 = mu+ + c*sqrt(var+), T2 = mu- - c*sqrt(var-) with c = ``std_scale``
    (c = 0 gives T1 = mu+, T2 = mu-).

    Raises:
        NotSeparatedError: when the thresholds do not satisfy T1 > T2
    """
    if not stats.initialized:
        raise ValidationError("statistics are not initialized on both sides")
    if stats.mu_pos <= stats.mu_neg:
        raise NotSeparatedError(details=f"mu+={stats.mu_pos:.6g} mu-={stats.mu_neg:.6g}")
    t1 = stats.mu_pos + std_scale * np.sqrt(stats.var_pos)
    t2 = stats.mu_neg - std_scale * np.sqrt(stats.var_neg)
    return MiningThresholds(float(t1), float(t2))


def _cap(pairs: np.ndarray, sims: np.ndarray, cap: int,
         descending: bool) -> Tuple[np.ndarray, np.ndarray]:
    if cap <= 0 or len(sims) <= cap:
        return pairs, sims
    # Stable sort keeps lexicographic pair order among equal similarities
    order = np.argsort(-sims if descending else sims, kind='stable')[:cap]
    order.sort()
    return pairs[order], sims[order]


def mine_pairs(basis: BasisMatrix, embeddings, thresholds: MiningThresholds,
               pair_cap: int = 0, stats: Optional[GaussStats] = None,
               pseudo_labels=None) -> MinedPairs:
    """
    Score every unordered in-batch pair by cos(W_a f_i, W_a f_j) and keep
    s >= t1 as positives, s <= t2 as negatives. With ``pair_cap`` > 0 each side
    keeps only its ``pair_cap`` most extreme pairs.

    With ``pseudo_labels`` the candidates are the pseudo pairs: positives must
    share a pseudo label and negatives must not.
    """
    f = as_matrix(getattr(embeddings, 'embeddings', embeddings))
    if f.shape[0] < 2:
        raise ValidationError("at least 2 samples are needed to mine pairs")
    i, j, sims, degenerate = scored_pairs(basis, f)
    pairs = np.stack([i, j], axis=1)
    pos = sims >= thresholds.t1
    neg = sims <= thresholds.t2
    if pseudo_labels is not None:
        labels = np.asarray(pseudo_labels)
        if labels.shape != (f.shape[0],):
            raise ShapeMismatchError("one pseudo label per embedding required")
        same = labels[i] == labels[j]
        pos &= same
        neg &= ~same
    positives, pos_sims = _cap(pairs[pos], sims[pos], pair_cap, descending=True)
    negatives, neg_sims = _cap(pairs[neg], sims[neg], pair_cap, descending=False)
    return MinedPairs(positives, negatives, pos_sims, neg_sims, thresholds, stats, degenerate)


def mining_purity(mined: MinedPairs, truth) -> Tuple[Optional[float], Optional[float]]:
    """
    Fraction of mined positives whose true classes match, and of mined
    negatives whose true classes differ (None for an empty side).
    """
    truth = np.asarray(truth)
    pos_purity = None
    neg_purity = None
    if len(mined.positives):
        pos_purity = float(np.mean(truth[mined.positives[:, 0]] == truth[mined.positives[:, 1]]))
    if len(mined.negatives):
        neg_purity = float(np.mean(truth[mined.negatives[:, 0]] != truth[mined.negatives[:, 1]]))
    return pos_purity, neg_purity


def basis_to_text(basis: BasisMatrix) -> str:
    lines = [f"{BASIS_MAGIC} v1", f"basis {basis.k_b} {basis.d}"]
    lines.extend(format_matrix(basis.values))
    lines.append("end")
    return "\n".join(lines) + "\n"


def basis_from_text(text: str, path=None) -> BasisMatrix:
    reader = ContainerReader(text, path)
    reader.expect_header(BASIS_MAGIC)
    rows, cols = reader.read_ints("basis", 2)
    if rows < 1 or cols < 1:
        raise reader.error(f"invalid basis shape {rows}x{cols}")
    values = reader.read_matrix(rows, cols)
    reader.expect_end()
    return BasisMatrix(values)


def save_basis(basis: BasisMatrix, path: str) -> None:
    write_text(path, basis_to_text(basis).splitlines())


def load_basis(path: str) -> BasisMatrix:
    try:
        return basis_from_text(read_text(path), path)
    except ValidationError as exc:
        raise FormatError(str(exc), path=path) from exc
