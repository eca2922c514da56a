"""
Feed-forward embedding network used for both the teacher and the student.

Hidden layers apply an affine map followed by max(0, x); the last layer is
affine only, and its rows are L2-normalized when ``normalize_output`` is set.
Parameters are immutable values: every update returns a new object.
"""
import hashlib
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .error_handler import (
    DeadEmbeddingError, FormatError, ShapeMismatchError, ValidationError,
)
from .numerics import as_matrix
from .text_format import ContainerReader, format_matrix, format_row, read_text, write_text

PARAMS_MAGIC = "slade-params"


@dataclass(frozen=True, eq=False)
class EmbeddingParams:
    """
    Layered weights of an embedding network.

    Attributes:
        layer_dims: Widths from input through hidden layers to embedding dim
        weights: Per-layer (dims[i+1] x dims[i]) matrices
        biases: Per-layer (dims[i+1],) vectors
        normalize_output: Whether forward L2-normalizes output rows
    """
    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    normalize_output: bool = True

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, 'layer_dims', dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValidationError(f"invalid layer dims {list(dims)}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeMismatchError("one weight matrix and one bias per layer required")
        weights = []
        biases = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (dims[i + 1], dims[i]):
                raise ShapeMismatchError(
                    f"layer {i} weights have shape {w.shape}, "
                    f"expected {(dims[i + 1], dims[i])}")
            if b.shape != (dims[i + 1],):
                raise ShapeMismatchError(f"layer {i} bias has shape {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"non-finite parameter in layer {i}")
            w.setflags(write=False)
            b.setflags(write=False)
            weights.append(w)
            biases.append(b)
        object.__setattr__(self, 'weights', tuple(weights))
        object.__setattr__(self, 'biases', tuple(biases))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def equals(self, other: "EmbeddingParams") -> bool:
        """Bit-exact equality of every parameter."""
        return (self.layer_dims == other.layer_dims
                and self.normalize_output == other.normalize_output
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))


@dataclass(frozen=True, eq=False)
class EmbeddingGrads:
    """Gradients with the same layout as EmbeddingParams."""
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @classmethod
    def zeros_like(cls, params: EmbeddingParams) -> "EmbeddingGrads":
        return cls(tuple(np.zeros_like(w) for w in params.weights),
                   tuple(np.zeros_like(b) for b in params.biases))

    def __add__(self, other: "EmbeddingGrads") -> "EmbeddingGrads":
        return EmbeddingGrads(tuple(a + b for a, b in zip(self.weights, other.weights)),
                              tuple(a + b for a, b in zip(self.biases, other.biases)))

    def scaled(self, factor: float) -> "EmbeddingGrads":
        return EmbeddingGrads(tuple(factor * w for w in self.weights),
                              tuple(factor * b for b in self.biases))

    def flat(self) -> np.ndarray:
        """All gradient entries, layer by layer, weights before bias."""
        parts: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b.reshape(-1))
        return np.concatenate(parts)


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    """Embeddings of a batch of samples, one row per sample."""
    embeddings: np.ndarray
    normalized: bool = True

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class _Trace:
    activations: List[np.ndarray]   # layer inputs, activations[0] is the batch
    pre_activations: List[np.ndarray]
    raw_output: np.ndarray
    norms: np.ndarray
    output: np.ndarray


def init_params(seed: int, layer_dims: Sequence[int],
                normalize_output: bool = True) -> EmbeddingParams:
    """
    Random initialization: zero-mean Gaussian weights scaled by 1/sqrt(fan_in),
    zero biases. Deterministic for a fixed seed.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValidationError(f"invalid layer dims {dims}: need at least 2 positive widths")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return EmbeddingParams(tuple(dims), tuple(weights), tuple(biases), normalize_output)


def _layers(params: EmbeddingParams,
            inputs) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeMismatchError(
            f"inputs have shape {x.shape}, expected (n, {params.input_dim})")
    x = as_matrix(x)
    activations = [x]
    pre_activations = []
    h = x
    last = params.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre_activations.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        activations.append(h)
    raw = activations.pop()
    return activations, pre_activations, raw


def _trace(params: EmbeddingParams, inputs) -> _Trace:
    activations, pre_activations, raw = _layers(params, inputs)
    if params.normalize_output:
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise DeadEmbeddingError(
                details=f"{int(np.count_nonzero(norms == 0.0))} of {raw.shape[0]} rows")
        output = raw / norms
    else:
        norms = np.ones((raw.shape[0], 1))
        output = raw
    return _Trace(activations, pre_activations, raw, norms, output)


def live_rows(params: EmbeddingParams, inputs) -> np.ndarray:
    """
    Mask of the input rows the network can embed.

    With ``normalize_output`` a row whose raw output is exactly zero has no
    direction; ``forward`` raises on such rows, so callers that must not
    abort filter them with this mask first.
    """
    raw = _layers(params, inputs)[2]
    if not params.normalize_output:
        return np.ones(raw.shape[0], dtype=bool)
    return np.any(raw != 0.0, axis=1)


def forward(params: EmbeddingParams, inputs) -> EmbeddingBatch:
    """Embed a batch of input rows."""
    return EmbeddingBatch(_trace(params, inputs).output, params.normalize_output)


def embed(params: EmbeddingParams, inputs) -> np.ndarray:
    """Shorthand for ``forward(params, inputs).embeddings``."""
    return forward(params, inputs).embeddings


def backward(params: EmbeddingParams, inputs, grad_embeddings) -> EmbeddingGrads:
    """
    Reverse-mode gradients of ``sum(grad_embeddings * forward(params, inputs))``
    with respect to every weight and bias, including the normalization Jacobian.
    """
    trace = _trace(params, inputs)
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise ShapeMismatchError(
            f"grad_embeddings shape {g.shape} does not match output {trace.output.shape}")
    if params.normalize_output:
        y = trace.output
        g = (g - y * np.sum(y * g, axis=1, keepdims=True)) / trace.norms

    grad_w = [np.empty(0)] * params.num_layers
    grad_b = [np.empty(0)] * params.num_layers
    last = params.num_layers - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (trace.pre_activations[i] > 0.0)
        grad_w[i] = g.T @ trace.activations[i]
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i]
    return EmbeddingGrads(tuple(grad_w), tuple(grad_b))


def _check_grads(params: EmbeddingParams, grads: EmbeddingGrads) -> None:
    for w, gw, b, gb in zip(params.weights, grads.weights, params.biases, grads.biases):
        if w.shape != gw.shape or b.shape != gb.shape:
            raise ShapeMismatchError("gradient layout does not match parameters")


def sgd_step(params: EmbeddingParams, grads: EmbeddingGrads,
             learning_rate: float) -> EmbeddingParams:
    """Plain gradient step: params - learning_rate * grads."""
    if learning_rate < 0:
        raise ValidationError("learning rate must be nonnegative")
    _check_grads(params, grads)
    return EmbeddingParams(
        params.layer_dims,
        tuple(w - learning_rate * gw for w, gw in zip(params.weights, grads.weights)),
        tuple(b - learning_rate * gb for b, gb in zip(params.biases, grads.biases)),
        params.normalize_output,
    )


def momentum_step(params: EmbeddingParams, grads: EmbeddingGrads, velocity: EmbeddingGrads,
                  learning_rate: float,
                  momentum: float) -> Tuple[EmbeddingParams, EmbeddingGrads]:
    """Heavy-ball step: v <- momentum * v + g; params <- params - lr * v."""
    if not 0.0 <= momentum < 1.0:
        raise ValidationError("momentum must be in [0, 1)")
    new_velocity = velocity.scaled(momentum) + grads
    return sgd_step(params, new_velocity, learning_rate), new_velocity


def params_to_text(params: EmbeddingParams) -> str:
    lines = [f"{PARAMS_MAGIC} v1",
             "layer_dims " + " ".join(str(d) for d in params.layer_dims),
             f"normalize_output {int(params.normalize_output)}"]
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        lines.append(f"layer {i}")
        lines.append(f"weights {w.shape[0]} {w.shape[1]}")
        lines.extend(format_matrix(w))
        lines.append(f"bias {b.shape[0]}")
        lines.append(format_row(b))
    lines.append("end")
    return "\n".join(lines) + "\n"


def params_from_text(text: str, path=None) -> EmbeddingParams:
    reader = ContainerReader(text, path)
    reader.expect_header(PARAMS_MAGIC)
    dims = reader.read_ints("layer_dims")
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise reader.error(f"invalid layer_dims {dims}")
    (flag,) = reader.read_ints("normalize_output", 1)
    weights = []
    biases = []
    for i in range(len(dims) - 1):
        number = reader.line_number
        (layer,) = reader.read_ints("layer", 1)
        if layer != i:
            raise reader.error(f"expected layer {i}, got {layer}", number)
        number = reader.line_number
        rows, cols = reader.read_ints("weights", 2)
        if (rows, cols) != (dims[i + 1], dims[i]):
            raise reader.error(
                f"layer {i} declares weights {rows}x{cols}, "
                f"layer_dims imply {dims[i + 1]}x{dims[i]}", number)
        weights.append(reader.read_matrix(rows, cols))
        number = reader.line_number
        (size,) = reader.read_ints("bias", 1)
        if size != dims[i + 1]:
            raise reader.error(f"layer {i} declares bias {size}, expected {dims[i + 1]}",
                               number)
        biases.append(reader.read_row(size))
    reader.expect_end()
    return EmbeddingParams(tuple(dims), tuple(weights), tuple(biases), bool(flag))


def save_params(params: EmbeddingParams, path: str) -> None:
    """Write ``params`` as a ``slade-params v1`` text file."""
    write_text(path, params_to_text(params).splitlines())


def load_params(path: str) -> EmbeddingParams:
    """Read a ``slade-params v1`` text file."""
    try:
        return params_from_text(read_text(path), path)
    except (ShapeMismatchError, ValidationError) as exc:
        raise FormatError(str(exc), path=path) from exc


def params_fingerprint(params: EmbeddingParams) -> str:
    """Checkpoint identifier: first 16 hex digits of the sha256 of the serialized params."""
    return hashlib.sha256(params_to_text(params).encode('utf-8')).hexdigest()[:16]
