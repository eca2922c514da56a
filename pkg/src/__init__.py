"""
SLADE metric - self-training distance metric learning.
"""
from .config_manager import TrainConfig, load_config
from .datasets import Dataset, SynthSpec, generate_synth, load_dataset
from .error_handler import ErrorCategory, ErrorParser, SladeError
from .retrieval_eval import RetrievalIndex, RetrievalReport, evaluate, rank_gallery
from .run_validator import RunValidation, RunValidator, ValidationResult
from .trainer import (
    PipelineState, generate_pseudo_labels, run_folds, self_train, train_student,
    train_teacher, warmup_basis,
)

__version__ = "1.0.0"

__all__ = [
    'TrainConfig',
    'load_config',
    'Dataset',
    'SynthSpec',
    'generate_synth',
    'load_dataset',
    'ErrorCategory',
    'ErrorParser',
    'SladeError',
    'RetrievalIndex',
    'RetrievalReport',
    'evaluate',
    'rank_gallery',
    'RunValidation',
    'RunValidator',
    'ValidationResult',
    'PipelineState',
    'generate_pseudo_labels',
    'run_folds',
    'self_train',
    'train_student',
    'train_teacher',
    'warmup_basis',
]
