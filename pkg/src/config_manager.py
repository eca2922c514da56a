"""
Training configuration.

Handles the flat ``key = value`` config file: parsing with strict unknown-key
rejection, validation and canonical dumping.
"""
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

from .error_handler import ConfigError
from .losses import RankingMargins, SDConfig, SIMILARITY_VARIANTS
from .text_format import read_text

logger = logging.getLogger(__name__)

STUDENT_MODES = ("pseudo_label", "basis", "basis_mining")
BASIS_INITS = ("class_means", "random")
# Where the student network starts: the teacher's own starting point, or the teacher
STUDENT_INITS = ("shared", "teacher")


@dataclass(frozen=True)
class TrainConfig:
    """
    Hyperparameters of the whole pipeline.

    Defaults follow the reference setting where one exists (lambda1=1,
    lambda2=0.25, beta=0.99, batch size 32); the rest are desk-scale choices.
    """
    lambda1: float = 1.0
    lambda2: float = 0.25
    beta: float = 0.99
    sd_margin: float = 0.5
    sd_lambda: float = 0.25
    m_pos: float = 0.3
    m_neg: float = 1.0
    clusters: int = 20
    kmeans_max_iter: int = 100
    kmeans_restarts: int = 5
    basis_count: int = 0
    basis_init: str = "class_means"
    basis_warmup_iters: int = 200
    epochs_teacher: int = 30
    epochs_student: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.0
    self_train_rounds: int = 1
    seed: int = 0
    folds: int = 1
    pair_cap: int = 0
    sd_variant: str = "sd"
    ce_scale: float = 5.0
    threshold_std_scale: float = 0.0
    student_mode: str = "basis_mining"
    student_init: str = "shared"
    hidden_dims: int = 64
    embedding_dim: int = 16

    @property
    def margins(self) -> RankingMargins:
        return RankingMargins(self.m_pos, self.m_neg)

    @property
    def sd_config(self) -> SDConfig:
        return SDConfig(self.sd_margin, self.sd_lambda)

    def layer_dims(self, input_dim: int, embedding_dim: Optional[int] = None):
        """Network widths: input, one hidden layer (if hidden_dims > 0), embedding."""
        out = self.embedding_dim if embedding_dim is None else embedding_dim
        if self.hidden_dims > 0:
            return [input_dim, self.hidden_dims, out]
        return [input_dim, out]

    def replace(self, **changes: Any) -> "TrainConfig":
        return replace(self, **changes)

    def validate(self) -> "TrainConfig":
        """Raise ConfigError on the first invalid value; returns self."""
        checks = [
            (self.lambda1 >= 0, "lambda1 must be >= 0"),
            (self.lambda2 >= 0, "lambda2 must be >= 0"),
            (0.0 <= self.beta < 1.0, "beta must be in [0, 1)"),
            (0.0 < self.sd_margin <= 2.0, "sd_margin must be in (0, 2]"),
            (self.sd_lambda >= 0, "sd_lambda must be >= 0"),
            (0 <= self.m_pos < self.m_neg, "margins need 0 <= m_pos < m_neg"),
            (self.clusters >= 1, "clusters must be >= 1"),
            (self.kmeans_max_iter >= 1, "kmeans_max_iter must be >= 1"),
            (self.kmeans_restarts >= 1, "kmeans_restarts must be >= 1"),
            (self.basis_count >= 0, "basis_count must be >= 0"),
            (self.basis_init in BASIS_INITS, f"basis_init must be one of {BASIS_INITS}"),
            (self.basis_warmup_iters >= 0, "basis_warmup_iters must be >= 0"),
            (self.epochs_teacher >= 0, "epochs_teacher must be >= 0"),
            (self.epochs_student >= 0, "epochs_student must be >= 0"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)"),
            (self.self_train_rounds >= 1, "self_train_rounds must be >= 1"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.folds >= 1, "folds must be >= 1"),
            (self.pair_cap >= 0, "pair_cap must be >= 0"),
            (self.sd_variant in SIMILARITY_VARIANTS,
             f"sd_variant must be one of {SIMILARITY_VARIANTS}"),
            (self.ce_scale > 0, "ce_scale must be > 0"),
            (self.threshold_std_scale >= 0, "threshold_std_scale must be >= 0"),
            (self.student_mode in STUDENT_MODES,
             f"student_mode must be one of {STUDENT_MODES}"),
            (self.student_init in STUDENT_INITS,
             f"student_init must be one of {STUDENT_INITS}"),
            (self.hidden_dims >= 0, "hidden_dims must be >= 0"),
            (self.embedding_dim >= 1, "embedding_dim must be >= 1"),
            (self.embedding_dim % self.folds == 0, "embedding_dim must be divisible by folds"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str, line: Optional[int]) -> Any:
    kind = _FIELD_TYPES[key]
    try:
        if kind in (int, 'int'):
            return int(raw)
        if kind in (float, 'float'):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}", line) from None
    return raw


def parse_config_text(text: str) -> TrainConfig:
    """
    Parse ``key = value`` lines. Blank lines and ``#`` comments are ignored;
    unknown or repeated keys are errors.
    """
    values: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", number)
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", number)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", number)
        if not value:
            raise ConfigError(f"missing value for {key!r}", number)
        values[key] = _coerce(key, value, number)
    return TrainConfig(**values).validate()


def load_config(path: str) -> Tuple[TrainConfig, str]:
    """
    Load a config file.

    Returns:
        (config, raw text) - the raw text is echoed verbatim into run reports
    """
    text = read_text(path)
    return parse_config_text(text), text


def dump_config(config: TrainConfig) -> str:
    """Canonical text form: every key, in declaration order."""
    return "".join(f"{key} = {value}\n" for key, value in asdict(config).items())
