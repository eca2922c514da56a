"""
Exact retrieval evaluation: MAP@R, R-Precision, P@1 and Recall@K.

Gallery items are ranked by descending cosine similarity to the query, ties
broken by ascending gallery index. For a query with R relevant gallery items:

- P@1: 1 if the top item shares the query class
- RP: fraction of the top R items sharing the class
- MAP@R: (1/R) * sum_{i<=R} P(i), where P(i) is the precision over the top i
  when position i is a match and 0 otherwise
- Recall@K: 1 if any of the top K items shares the class
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .error_handler import ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 2, 4, 8)
UNIT_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    """Unit-normalized gallery embeddings with aligned class ids."""
    gallery_embeddings: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gallery_embeddings, dtype=np.float64)
        y = np.asarray(self.gallery_labels, dtype=np.int64)
        if g.ndim != 2 or y.shape != (g.shape[0],):
            raise ShapeMismatchError("gallery labels must align with embedding rows")
        norms = np.linalg.norm(g, axis=1)
        if g.shape[0] and np.max(np.abs(norms - 1.0)) > UNIT_TOLERANCE:
            raise ValidationError("gallery rows must be unit-normalized")
        object.__setattr__(self, 'gallery_embeddings', g)
        object.__setattr__(self, 'gallery_labels', y)

    def __len__(self) -> int:
        return self.gallery_embeddings.shape[0]


@dataclass
class RetrievalReport:
    """Mean retrieval metrics over the evaluated queries."""
    map_at_r: float
    r_precision: float
    p_at_1: float
    recall_at_k: Dict[int, float] = field(default_factory=dict)
    query_count: int = 0
    skipped_queries: int = 0

    def to_dict(self) -> dict:
        return {
            'map_at_r': self.map_at_r,
            'r_precision': self.r_precision,
            'p_at_1': self.p_at_1,
            'recall_at_k': {str(k): v for k, v in sorted(self.recall_at_k.items())},
            'query_count': self.query_count,
            'skipped_queries': self.skipped_queries,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RetrievalReport":
        return cls(
            map_at_r=float(data['map_at_r']),
            r_precision=float(data['r_precision']),
            p_at_1=float(data['p_at_1']),
            recall_at_k={int(k): float(v) for k, v in data['recall_at_k'].items()},
            query_count=int(data['query_count']),
            skipped_queries=int(data.get('skipped_queries', 0)),
        )

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def rank_gallery(index: RetrievalIndex, query, exclude: Optional[int] = None) -> np.ndarray:
    """
    Gallery indices by descending cosine similarity, ties by ascending index,
    with ``exclude`` (self-match) removed.
    """
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.gallery_embeddings.shape[1],):
        raise ShapeMismatchError("query dimension does not match the gallery")
    sims = index.gallery_embeddings @ q
    ids = np.arange(len(index))
    if exclude is not None:
        keep = ids != exclude
        sims, ids = sims[keep], ids[keep]
    if ids.size == 0:
        raise ValidationError("gallery is empty after exclusion")
    # lexsort: last key is primary
    return ids[np.lexsort((ids, -sims))]


def _query_metrics(relevant: np.ndarray, r: int, ks: Sequence[int]):
    top_r = relevant[:r].astype(np.float64)
    precision_at_i = np.cumsum(top_r) / np.arange(1, r + 1)
    map_r = float(np.sum(precision_at_i * top_r) / r)
    rp = float(np.sum(top_r) / r)
    p1 = float(relevant[0])
    recalls = {k: float(np.any(relevant[:k])) for k in ks}
    return map_r, rp, p1, recalls


def evaluate(index: RetrievalIndex, queries, query_labels, ks: Sequence[int] = DEFAULT_KS,
             exclude_ids: Optional[Sequence[Optional[int]]] = None) -> RetrievalReport:
    """
    Evaluate queries against the gallery.

    Args:
        index: Gallery to search
        queries: Unit-normalized query rows
        query_labels: Class id per query
        ks: Cutoffs for Recall@K
        exclude_ids: Gallery row to drop for each query (leave-one-out)

    Queries whose class has no other gallery member are skipped and counted.
    """
    q = np.asarray(queries, dtype=np.float64)
    y = np.asarray(query_labels, dtype=np.int64)
    if q.ndim != 2 or y.shape != (q.shape[0],):
        raise ShapeMismatchError("query labels must align with query rows")
    if any(k < 1 for k in ks):
        raise ValidationError("Recall@K cutoffs must be positive")
    ks = sorted(set(int(k) for k in ks))

    class_counts: Dict[int, int] = {}
    for label in index.gallery_labels:
        class_counts[int(label)] = class_counts.get(int(label), 0) + 1

    per_query = []
    skipped = 0
    for n in range(q.shape[0]):
        exclude = None if exclude_ids is None else exclude_ids[n]
        r = class_counts.get(int(y[n]), 0)
        if exclude is not None and index.gallery_labels[exclude] == y[n]:
            r -= 1
        if r <= 0:
            skipped += 1
            continue
        ranked = rank_gallery(index, q[n], exclude)
        relevant = index.gallery_labels[ranked] == y[n]
        per_query.append(_query_metrics(relevant, r, ks))

    if skipped:
        logger.warning("skipped %d queries without relevant gallery items", skipped)
    if not per_query:
        return RetrievalReport(0.0, 0.0, 0.0, {k: 0.0 for k in ks}, 0, skipped)

    # Reduction in fixed query order
    map_r = float(np.mean([m[0] for m in per_query]))
    rp = float(np.mean([m[1] for m in per_query]))
    p1 = float(np.mean([m[2] for m in per_query]))
    recall = {k: float(np.mean([m[3][k] for m in per_query])) for k in ks}
    if 1 in recall and recall[1] != p1:
        logger.error("Recall@1 (%r) disagrees with P@1 (%r)", recall[1], p1)
    return RetrievalReport(map_r, rp, p1, recall, len(per_query), skipped)


def evaluate_leave_one_out(embeddings, labels,
                           ks: Sequence[int] = DEFAULT_KS) -> RetrievalReport:
    """Every item queries the rest of the set, excluding itself."""
    index = RetrievalIndex(embeddings, labels)
    return evaluate(index, index.gallery_embeddings, index.gallery_labels, ks,
                    exclude_ids=list(range(len(index))))
