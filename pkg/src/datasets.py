"""
Dataset files and the synthetic seen/unseen benchmark.

``slade-data v1`` layout::

    slade-data v1
    dim <feature count>
    labeled <0|1>
    <class id or ?> <value> ... <value>      one sample per line

Ground-truth labels of unlabeled samples live in a separate ``slade-truth v1``
sidecar that only evaluation code reads.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .error_handler import (
    FormatError, SeparationInfeasibleError, ShapeMismatchError, ValidationError,
)
from .text_format import ContainerReader, format_row, parse_row, read_text, write_text

logger = logging.getLogger(__name__)

DATA_MAGIC = "slade-data"
TRUTH_MAGIC = "slade-truth"
UNLABELED = -1

# Candidate draws allowed per class center before giving up
CENTER_RETRY_BUDGET = 10000


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    In-memory dataset.

    Attributes:
        features: n x dim feature matrix, rows in file order
        labels: class id per row (UNLABELED for ``?``); None for an unlabeled file
    """
    features: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ShapeMismatchError(f"features must be 2-D, got shape {features.shape}")
        object.__setattr__(self, 'features', features)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (features.shape[0],):
                raise ShapeMismatchError("one label per row required")
            if labels.size and labels.min() < UNLABELED:
                raise ValidationError("class ids must be nonnegative")
            object.__setattr__(self, 'labels', labels)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def classes(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.labels[self.labels != UNLABELED])

    def labeled_part(self) -> "Dataset":
        """Rows carrying a class id."""
        if self.labels is None:
            return Dataset(self.features[:0], np.zeros(0, dtype=np.int64))
        keep = self.labels != UNLABELED
        return Dataset(self.features[keep], self.labels[keep])

    def unlabeled_features(self) -> np.ndarray:
        """Rows without a class id (all rows of an unlabeled file)."""
        if self.labels is None:
            return self.features
        return self.features[self.labels == UNLABELED]

    def select_classes(self, classes) -> "Dataset":
        if self.labels is None:
            raise ValidationError("cannot select classes of an unlabeled dataset")
        keep = np.isin(self.labels, np.asarray(classes))
        return Dataset(self.features[keep], self.labels[keep])

    def equals(self, other: "Dataset") -> bool:
        if self.labeled != other.labeled or not np.array_equal(self.features, other.features):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


def dataset_to_text(dataset: Dataset) -> str:
    lines = [f"{DATA_MAGIC} v1", f"dim {dataset.dim}", f"labeled {int(dataset.labeled)}"]
    for idx, row in enumerate(dataset.features):
        if dataset.labels is None or dataset.labels[idx] == UNLABELED:
            tag = "?"
        else:
            tag = str(int(dataset.labels[idx]))
        lines.append(f"{tag} {format_row(row)}")
    return "\n".join(lines) + "\n"


def dataset_from_text(text: str, path: Optional[str] = None) -> Dataset:
    reader = ContainerReader(text, path)
    reader.expect_header(DATA_MAGIC)
    (dim,) = reader.read_ints("dim", 1)
    if dim < 1:
        raise reader.error(f"invalid dim {dim}")
    number = reader.line_number
    (flag,) = reader.read_ints("labeled", 1)
    if flag not in (0, 1):
        raise reader.error(f"labeled flag must be 0 or 1, got {flag}", number)

    rows = []
    labels = []
    while not reader.at_end():
        number, line = reader.next_line()
        parts = line.split(None, 1)
        tag = parts[0]
        rest = parts[1] if len(parts) > 1 else ""
        if tag == '?':
            labels.append(UNLABELED)
        elif not flag:
            raise FormatError(f"class id {tag!r} in an unlabeled file", line=number, path=path)
        else:
            try:
                label = int(tag)
            except ValueError:
                raise FormatError(f"bad class id {tag!r}", line=number, path=path) from None
            if label < 0:
                raise FormatError(f"negative class id {label}", line=number, path=path)
            labels.append(label)
        rows.append(parse_row(rest, dim, number, path))

    features = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return Dataset(features, np.array(labels, dtype=np.int64) if flag else None)


def write_dataset(dataset: Dataset, path: str) -> None:
    """Write ``dataset`` as a ``slade-data v1`` file."""
    write_text(path, dataset_to_text(dataset).splitlines())


def load_dataset(path: str) -> Dataset:
    """Parse a ``slade-data v1`` file; row order is preserved."""
    return dataset_from_text(read_text(path), path)


def truth_to_text(labels) -> str:
    labels = np.asarray(labels, dtype=np.int64)
    lines = [f"{TRUTH_MAGIC} v1", f"count {labels.size}"]
    lines.extend(str(int(v)) for v in labels)
    lines.append("end")
    return "\n".join(lines) + "\n"


def write_truth(labels, path: str) -> None:
    write_text(path, truth_to_text(labels).splitlines())


def load_truth(path: str) -> np.ndarray:
    reader = ContainerReader(read_text(path), path)
    reader.expect_header(TRUTH_MAGIC)
    (count,) = reader.read_ints("count", 1)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        number, line = reader.next_line()
        try:
            labels[i] = int(line)
        except ValueError:
            raise FormatError(f"bad class id {line!r}", line=number, path=path) from None
    reader.expect_end()
    return labels


@dataclass(frozen=True)
class SynthSpec:
    """
    Parameters of the synthetic seen/unseen benchmark.

    Seen classes are labeled; unseen classes only appear in the unlabeled pool
    and the held-out test split.
    """
    seen_classes: int = 10
    unseen_classes: int = 10
    samples_per_class: int = 30
    dim: int = 16
    center_separation: float = 6.0
    within_std: float = 1.0
    seed: int = 0
    test_samples_per_class: int = 0  # 0 means samples_per_class

    def __post_init__(self):
        if self.seen_classes < 1 or self.unseen_classes < 0:
            raise ValidationError("need at least one seen class and no negative counts")
        if self.samples_per_class < 1 or self.dim < 1 or self.test_samples_per_class < 0:
            raise ValidationError("samples_per_class and dim must be positive")
        if not (self.center_separation > 0 and self.within_std > 0):
            raise ValidationError("center_separation and within_std must be positive")


@dataclass(frozen=True, eq=False)
class SyntheticBenchmark:
    """
    Generated benchmark.

    ``unlabeled`` carries no labels; ``unlabeled_truth`` is the sidecar used only
    for purity scoring. ``test`` is the held-out retrieval split.
    """
    labeled: Dataset
    unlabeled: Dataset
    unlabeled_truth: np.ndarray
    test: Dataset
    centers: np.ndarray


def _sample_centers(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    total = spec.seen_classes + spec.unseen_classes
    radius = spec.center_separation
    centers = np.zeros((total, spec.dim))
    for c in range(total):
        for _ in range(CENTER_RETRY_BUDGET):
            direction = rng.standard_normal(spec.dim)
            norm = np.linalg.norm(direction)
            if norm == 0.0:
                continue
            candidate = radius * direction / norm
            if c == 0 or np.min(np.linalg.norm(centers[:c] - candidate, axis=1)) >= radius:
                centers[c] = candidate
                break
        else:
            raise SeparationInfeasibleError(
                details=f"placed {c} of {total} centers in dim {spec.dim}")
    return centers


def _draw(centers: np.ndarray, classes, per_class: int, std: float,
          rng: np.random.Generator):
    features = []
    labels = []
    for c in classes:
        features.append(centers[c] + std * rng.standard_normal((per_class, centers.shape[1])))
        labels.append(np.full(per_class, c, dtype=np.int64))
    if not features:
        return np.zeros((0, centers.shape[1])), np.zeros(0, dtype=np.int64)
    return np.concatenate(features), np.concatenate(labels)


def generate_synth(spec: SynthSpec) -> SyntheticBenchmark:
    """
    Generate the benchmark.

    Class centers lie on a sphere of radius ``center_separation`` with pairwise
    distance at least ``center_separation`` (seeded rejection sampling); samples
    are isotropic Gaussians around them. The unlabeled pool is empty without
    unseen classes, and otherwise mixes fresh samples of every class in shuffled
    order.
    """
    rng = np.random.default_rng(spec.seed)
    centers = _sample_centers(spec, rng)
    seen = range(spec.seen_classes)
    everything = range(spec.seen_classes + spec.unseen_classes)

    x_l, y_l = _draw(centers, seen, spec.samples_per_class, spec.within_std, rng)

    if spec.unseen_classes:
        x_u, y_u = _draw(centers, everything, spec.samples_per_class, spec.within_std, rng)
        order = rng.permutation(len(y_u))
        x_u, y_u = x_u[order], y_u[order]
        test_classes = range(spec.seen_classes, spec.seen_classes + spec.unseen_classes)
    else:
        x_u, y_u = np.zeros((0, spec.dim)), np.zeros(0, dtype=np.int64)
        test_classes = seen

    per_test = spec.test_samples_per_class or spec.samples_per_class
    x_t, y_t = _draw(centers, test_classes, per_test, spec.within_std, rng)
    logger.info("generated %d labeled, %d unlabeled, %d test samples",
                len(y_l), len(y_u), len(y_t))
    return SyntheticBenchmark(Dataset(x_l, y_l), Dataset(x_u), y_u, Dataset(x_t, y_t), centers)
