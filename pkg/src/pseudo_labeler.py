"""
k-means clustering of teacher embeddings; cluster ids become pseudo labels.

Seeding is k-means++, refinement is Lloyd's algorithm. A cluster that loses
all of its members is re-seeded with the point farthest from its assigned
center, so k is preserved.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .error_handler import FormatError, ShapeMismatchError, SladeError, ValidationError
from .numerics import as_matrix
from .text_format import ContainerReader, format_matrix, format_float, read_text, write_text

logger = logging.getLogger(__name__)

KMEANS_MAGIC = "slade-kmeans"

# Relative slack for the non-increasing inertia check (rounding only)
_INERTIA_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """Fitted k-means model."""
    centers: np.ndarray
    inertia: float
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True, eq=False)
class PseudoLabeledSet:
    """
    Unlabeled samples annotated with cluster ids.

    Attributes:
        samples: Unlabeled feature matrix
        pseudo_labels: Cluster id per sample, in [0, k)
        source_teacher: Fingerprint of the teacher checkpoint that embedded them
        k: Number of clusters
        model: The fitted clustering, when produced by k-means
        source_rows: Pool row of each sample when some pool rows were left out
    """
    samples: np.ndarray
    pseudo_labels: np.ndarray
    source_teacher: str
    k: int
    model: Optional[ClusterModel] = None
    source_rows: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = np.asarray(self.pseudo_labels, dtype=np.int64)
        object.__setattr__(self, 'pseudo_labels', labels)
        if labels.shape != (self.samples.shape[0],):
            raise ShapeMismatchError("one pseudo label per sample required")
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise ValidationError(f"pseudo labels must lie in [0, {self.k})")
        if self.source_rows is not None and len(self.source_rows) != labels.size:
            raise ShapeMismatchError("one source row per sample required")

    def __len__(self) -> int:
        return self.samples.shape[0]


def _sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum('nkd,nkd->nk', diff, diff)


def _assign(points: np.ndarray, centers: np.ndarray):
    d2 = _sq_distances(points, centers)
    # argmin returns the lowest index among ties
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            raise ValidationError(f"k={k} exceeds the number of distinct points")
        idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_distances(points, points[idx:idx + 1])[:, 0])
    return points[chosen].copy()


def _repair_empty(points: np.ndarray, labels: np.ndarray, dists: np.ndarray,
                  centers: np.ndarray) -> int:
    """Re-seed empty clusters in place; returns how many were repaired."""
    counts = np.bincount(labels, minlength=centers.shape[0])
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return 0
    dists = dists.copy()
    for c in empty:
        far = int(np.argmax(dists))
        centers[c] = points[far]
        labels[far] = c
        dists[far] = -1.0
    return int(empty.size)


def _lloyd(points: np.ndarray, k: int, max_iter: int,
           rng: np.random.Generator) -> ClusterModel:
    centers = _kmeans_pp(points, k, rng)
    labels, dists = _assign(points, centers)
    inertia = float(dists.sum())
    iterations = 0
    for iterations in range(1, max_iter + 1):
        repaired = _repair_empty(points, labels, dists, centers)
        if repaired:
            logger.debug("re-seeded %d empty clusters", repaired)
        for c in range(k):
            members = labels == c
            if np.any(members):
                centers[c] = points[members].mean(axis=0)
        new_labels, dists = _assign(points, centers)
        new_inertia = float(dists.sum())
        if new_inertia > inertia + _INERTIA_SLACK * max(1.0, inertia):
            raise SladeError(f"k-means inertia increased from {inertia} to {new_inertia}")
        inertia = new_inertia
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        if stable:
            break
    return ClusterModel(centers, inertia, iterations)


def kmeans_fit(embeddings, k: int, max_iter: int = 100, seed: int = 0,
               restarts: int = 1) -> ClusterModel:
    """
    Fit k-means with k-means++ seeding and Lloyd iterations.

    With ``restarts`` > 1 the lowest-inertia run wins (earliest run on ties).
    Deterministic for a fixed seed.
    """
    points = as_matrix(getattr(embeddings, 'embeddings', embeddings))
    n = points.shape[0]
    if k < 1:
        raise ValidationError("k must be at least 1")
    if k > n:
        raise ValidationError(f"k={k} exceeds sample count {n}")
    if max_iter < 1:
        raise ValidationError("max_iter must be at least 1")
    if restarts < 1:
        raise ValidationError("restarts must be at least 1")

    best: Optional[ClusterModel] = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        model = _lloyd(points, k, max_iter, np.random.default_rng(child))
        if best is None or model.inertia < best.inertia:
            best = model
    assert best is not None
    logger.debug("k-means k=%d inertia=%.6g after %d iterations", k, best.inertia,
                 best.iterations)
    return best


def assign(model: ClusterModel, embeddings) -> np.ndarray:
    """Nearest-center cluster id per row; ties go to the lowest center index."""
    points = as_matrix(getattr(embeddings, 'embeddings', embeddings))
    if points.shape[1] != model.dim:
        raise ShapeMismatchError(f"embedding dim {points.shape[1]} != center dim {model.dim}")
    labels, _ = _assign(points, model.centers)
    return labels


def cluster_accuracy(predicted, truth) -> float:
    """
    Fraction of samples whose cluster maps to their true class under the
    best one-to-one matching of clusters to classes.
    """
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape:
        raise ShapeMismatchError("label arrays differ in length")
    if predicted.size == 0:
        return 1.0
    _, p = np.unique(predicted, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum()) / predicted.size


def model_to_text(model: ClusterModel) -> str:
    lines = [f"{KMEANS_MAGIC} v1",
             f"centers {model.k} {model.dim}",
             f"inertia {format_float(model.inertia)}",
             f"iterations {model.iterations}"]
    lines.extend(format_matrix(model.centers))
    lines.append("end")
    return "\n".join(lines) + "\n"


def model_from_text(text: str, path=None) -> ClusterModel:
    reader = ContainerReader(text, path)
    reader.expect_header(KMEANS_MAGIC)
    k, dim = reader.read_ints("centers", 2)
    if k < 1 or dim < 1:
        raise reader.error(f"invalid center shape {k}x{dim}")
    number, fields = reader.read_keyed("inertia")
    try:
        inertia = float(fields[0])
    except (IndexError, ValueError):
        raise reader.error("bad inertia value", number) from None
    (iterations,) = reader.read_ints("iterations", 1)
    centers = reader.read_matrix(k, dim)
    reader.expect_end()
    return ClusterModel(centers, inertia, iterations)


def save_model(model: ClusterModel, path: str) -> None:
    write_text(path, model_to_text(model).splitlines())


def load_model(path: str) -> ClusterModel:
    try:
        return model_from_text(read_text(path), path)
    except ValidationError as exc:
        raise FormatError(str(exc), path=path) from exc
