"""
Pre-flight validation for training runs.

Checks that the inputs of a run can satisfy the pipeline's preconditions
before any training starts:
- Labeled classes and per-class sample counts
- Unlabeled pool size against the cluster count
- Feature dimensions across datasets and checkpoints
- Embedding width against the fold count, basis size against the classes
- Writable output directory
"""
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config_manager import TrainConfig
from .datasets import Dataset
from .embedding_model import EmbeddingParams


@dataclass
class ValidationResult:
    """Result of one pre-flight check."""
    passed: bool
    message: str
    severity: str = "error"  # "error", "warning", "info"
    details: Optional[str] = None

    def __str__(self):
        prefix = "✓" if self.passed else "✗"
        return f"{prefix} {self.message}"


@dataclass
class RunValidation:
    """Collected results of a set of checks."""
    overall_valid: bool = True
    checks: List[ValidationResult] = field(default_factory=list)
    errors: List[ValidationResult] = field(default_factory=list)
    warnings: List[ValidationResult] = field(default_factory=list)

    def add_check(self, result: ValidationResult):
        self.checks.append(result)
        if result.passed and result.severity == "warning":
            self.warnings.append(result)
        elif not result.passed:
            if result.severity == "error":
                self.errors.append(result)
                self.overall_valid = False
            elif result.severity == "warning":
                self.warnings.append(result)

    def get_summary(self) -> str:
        """Human-readable summary of the results."""
        lines = ["✓ Run validation passed" if self.overall_valid else "✗ Run validation failed"]

        if self.errors:
            lines.append(f"\nErrors ({len(self.errors)}):")
            for error in self.errors:
                lines.append(f"  • {error.message}")
                if error.details:
                    lines.append(f"    {error.details}")

        if self.warnings:
            lines.append(f"\nWarnings ({len(self.warnings)}):")
            for warning in self.warnings:
                lines.append(f"  • {warning.message}")
                if warning.details:
                    lines.append(f"    {warning.details}")

        return "\n".join(lines)

    def get_error_messages(self) -> List[str]:
        return [error.message for error in self.errors]

    def get_warning_messages(self) -> List[str]:
        return [warning.message for warning in self.warnings]


class RunValidator:
    """
    Validates the inputs of a training command.

    Each ``validate_*`` method returns a fresh RunValidation; the CLI refuses to
    start when ``overall_valid`` is False.
    """

    MIN_CLASSES = 2
    MIN_SAMPLES_PER_CLASS = 2

    def __init__(self, config: TrainConfig):
        self.config = config

    def validate_teacher_run(self, labeled: Dataset,
                             output_dir: Optional[str] = None) -> RunValidation:
        validation = RunValidation()
        validation.add_check(self._check_labeled_classes(labeled))
        if output_dir:
            validation.add_check(self._check_write_permissions(output_dir))
        return validation

    def validate_self_train_run(self, labeled: Dataset, unlabeled: Dataset,
                                output_dir: Optional[str] = None,
                                teacher: Optional[EmbeddingParams] = None) -> RunValidation:
        """Checks for ``self-train``, ``train-student`` and ``run-folds``."""
        validation = self.validate_teacher_run(labeled, output_dir)
        validation.add_check(self._check_unlabeled_pool(unlabeled))
        validation.add_check(self._check_feature_dims(labeled, unlabeled))
        validation.add_check(self._check_folds(labeled))
        validation.add_check(self._check_basis_count(labeled))
        if teacher is not None:
            validation.add_check(self._check_checkpoint(teacher, labeled))
        return validation

    def validate_pseudo_label_run(self, teacher: EmbeddingParams, unlabeled: Dataset,
                                  output_dir: Optional[str] = None) -> RunValidation:
        validation = RunValidation()
        validation.add_check(self._check_unlabeled_pool(unlabeled))
        validation.add_check(self._check_checkpoint(teacher, unlabeled))
        if output_dir:
            validation.add_check(self._check_write_permissions(output_dir))
        return validation

    def _check_labeled_classes(self, labeled: Dataset) -> ValidationResult:
        part = labeled.labeled_part()
        if not labeled.labeled or len(part) == 0:
            return ValidationResult(False, "Labeled dataset has no labeled rows",
                                    details="Use a file with 'labeled 1' and class ids")
        classes, counts = np.unique(part.labels, return_counts=True)
        usable = int(np.sum(counts >= self.MIN_SAMPLES_PER_CLASS))
        if usable < self.MIN_CLASSES:
            return ValidationResult(
                False, f"Need at least {self.MIN_CLASSES} classes with "
                       f"{self.MIN_SAMPLES_PER_CLASS}+ samples, found {usable}",
                details=f"{classes.size} classes, {len(part)} labeled rows")
        singletons = [int(c) for c, n in zip(classes, counts) if n < self.MIN_SAMPLES_PER_CLASS]
        if singletons:
            return ValidationResult(
                True, f"{len(singletons)} class(es) have a single sample",
                severity="warning",
                details=f"Classes {singletons[:10]} contribute no positive pairs")
        return ValidationResult(True, f"{classes.size} labeled classes, {len(part)} samples",
                                severity="info")

    def _check_unlabeled_pool(self, unlabeled: Dataset) -> ValidationResult:
        count = len(unlabeled)
        if count < self.config.clusters:
            return ValidationResult(
                False, f"Unlabeled pool of {count} is smaller than clusters={self.config.clusters}",
                details="Lower 'clusters' or supply more unlabeled samples")
        return ValidationResult(True, f"Unlabeled pool: {count} samples", severity="info")

    def _check_feature_dims(self, labeled: Dataset, unlabeled: Dataset) -> ValidationResult:
        if labeled.dim != unlabeled.dim:
            return ValidationResult(
                False, f"Feature dims differ: labeled {labeled.dim}, unlabeled {unlabeled.dim}")
        return ValidationResult(True, f"Feature dim {labeled.dim}", severity="info")

    def _check_folds(self, labeled: Dataset) -> ValidationResult:
        folds = self.config.folds
        if self.config.embedding_dim % folds:
            return ValidationResult(
                False, f"embedding_dim {self.config.embedding_dim} is not divisible by "
                       f"folds={folds}")
        classes = labeled.classes().size
        if folds > 1 and classes < 2 * folds:
            return ValidationResult(
                False, f"{classes} labeled classes are too few for {folds} class folds",
                details="Each fold needs at least 2 training classes")
        return ValidationResult(True, f"{folds} fold(s)", severity="info")

    def _check_basis_count(self, labeled: Dataset) -> ValidationResult:
        classes = labeled.classes().size
        count = self.config.basis_count
        if count and count < classes:
            return ValidationResult(
                False, f"basis_count={count} is below the {classes} labeled classes",
                details="Use basis_count = 0 to size the basis to the classes")
        return ValidationResult(True, f"{count or classes} basis vectors", severity="info")

    def _check_checkpoint(self, params: EmbeddingParams, data: Dataset) -> ValidationResult:
        if params.input_dim != data.dim:
            return ValidationResult(
                False, f"Checkpoint expects {params.input_dim} features, data has {data.dim}")
        return ValidationResult(True, "Checkpoint matches the data", severity="info")

    def _check_write_permissions(self, output_dir: str) -> ValidationResult:
        """Check that the output directory exists (creating it) and is writable."""
        out = Path(output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            return ValidationResult(False, "Cannot create output directory",
                                    details=f"Failed to create: {out}\nError: {e}")
        if not os.access(out, os.W_OK):
            return ValidationResult(False, "No write permission for output directory",
                                    details=f"Cannot write to: {out}")
        return ValidationResult(True, "Write permissions verified for output directory",
                                severity="info")
