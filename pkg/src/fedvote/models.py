"""Three small differentiable classifiers with flat-parameter access.

Architectures: LINEAR (softmax regression), MLP (one relu hidden layer) and
CNN (valid 3x3 cross-correlation, relu, 2x2 max-pool, dense head). All end in
a softmax over the class logits and train by mini-batch SGD on multiclass
cross-entropy. Gradients are exact analytic backprop, checked against central
finite differences in the test suite.

Parameter flattening order (the public contract that makes positional
averaging meaningful): layer-major, weights before biases, row-major within
each array.
  linear: W[d,N], b[N]
  mlp:    W1[d,H], b1[H], W2[H,N], b2[N]
  cnn:    K[kh,kw,c,F], bc[F], W[flat,N], b[N]
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import CompatibilityError, FormatError, ShapeError
from .numerics import RngStream, Tensor, softmax_rows

__all__ = [
    "ArchKind",
    "Architecture",
    "ParameterVector",
    "BaseLearner",
    "TrainConfig",
    "architecture_for",
    "init_model",
    "forward",
    "predict_classes",
    "cross_entropy",
    "gradient",
    "train_local",
    "get_params",
    "set_params",
    "save_model",
    "load_model",
]

PROB_FLOOR = 1e-12
INIT_STD = 0.05

_TRAIN_SHUFFLE_LABEL = "train/shuffle"
_MODEL_MANIFEST = "model.json"


class ArchKind(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"
    CNN = "cnn"


@dataclass(frozen=True)
class Architecture:
    """Hyperparameters of one classifier; immutable and hashable."""

    kind: ArchKind
    input_shape: tuple[int, ...]
    num_classes: int
    hidden_width: int = 32
    conv_filters: int = 4
    conv_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", ArchKind(self.kind))
        shape = tuple(int(s) for s in self.input_shape)
        object.__setattr__(self, "input_shape", shape)
        if not shape or any(s < 1 for s in shape):
            raise ValueError(f"input_shape must be positive extents, got {shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kind is ArchKind.MLP and self.hidden_width < 1:
            raise ValueError(f"hidden_width must be >= 1, got {self.hidden_width}")
        if self.kind is ArchKind.CNN:
            if len(shape) != 3:
                raise ValueError(f"cnn input_shape must be (h, w, c), got {shape}")
            if self.conv_filters < 1 or self.conv_size < 1:
                raise ValueError("conv_filters and conv_size must be >= 1")
            h, w, _ = shape
            ch, cw = h - self.conv_size + 1, w - self.conv_size + 1
            if ch < 2 or cw < 2:
                raise ValueError(
                    f"cnn input {shape} too small: conv output {ch}x{cw} "
                    "leaves nothing to max-pool"
                )

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def layer_shapes(self) -> tuple[tuple[int, ...], ...]:
        """Array shapes in flattening order; rank-1 entries are biases."""
        d, n = self.input_size, self.num_classes
        if self.kind is ArchKind.LINEAR:
            return ((d, n), (n,))
        if self.kind is ArchKind.MLP:
            h = self.hidden_width
            return ((d, h), (h,), (h, n), (n,))
        height, width, c = self.input_shape
        ks, f = self.conv_size, self.conv_filters
        ph, pw = (height - ks + 1) // 2, (width - ks + 1) // 2
        return ((ks, ks, c, f), (f,), (ph * pw * f, n), (n,))

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes())


def architecture_for(
    kind: ArchKind,
    feature_shape: tuple[int, ...],
    num_classes: int,
    hidden_width: int = 32,
    conv_filters: int = 4,
    conv_size: int = 3,
) -> Architecture:
    """Architecture matched to a dataset's feature shape.

    The CNN views flat length-d features as a sqrt(d) x sqrt(d) x 1 image
    (d must be a perfect square); rank-2 features get a single channel.
    """
    kind = ArchKind(kind)
    shape = tuple(int(s) for s in feature_shape)
    if kind is ArchKind.CNN:
        if len(shape) == 1:
            side = math.isqrt(shape[0])
            if side * side != shape[0]:
                raise ValueError(
                    f"cnn needs square-arrangeable features; {shape[0]} is not a perfect square"
                )
            shape = (side, side, 1)
        elif len(shape) == 2:
            shape = (*shape, 1)
        elif len(shape) != 3:
            raise ValueError(f"cnn cannot consume feature shape {shape}")
    return Architecture(
        kind=kind,
        input_shape=shape,
        num_classes=num_classes,
        hidden_width=hidden_width,
        conv_filters=conv_filters,
        conv_size=conv_size,
    )


@dataclass(frozen=True)
class ParameterVector:
    """Flat view of all weights and biases of one architecture kind."""

    kind: ArchKind
    values: Tensor

    def __post_init__(self):
        object.__setattr__(self, "kind", ArchKind(self.kind))
        if len(self.values.shape) != 1:
            raise ValueError(f"parameter values must be rank-1, got {self.values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BaseLearner:
    """One differentiable classifier: architecture plus its flat parameters."""

    architecture: Architecture
    params: ParameterVector

    def __post_init__(self):
        if self.params.kind is not self.architecture.kind:
            raise CompatibilityError(
                f"parameter kind {self.params.kind.value} does not match "
                f"architecture kind {self.architecture.kind.value}"
            )
        expected = self.architecture.param_count
        if len(self.params) != expected:
            raise CompatibilityError(
                f"{self.architecture.kind.value} expects {expected} parameters, "
                f"got {len(self.params)}"
            )

    @property
    def num_classes(self) -> int:
        return self.architecture.num_classes


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch SGD settings. learning_rate 0 is a valid no-op."""

    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ValueError(f"seed must be a 64-bit unsigned value, got {self.seed}")


# --- parameter packing ------------------------------------------------------


def _unpack(arch: Architecture, theta: np.ndarray) -> list[np.ndarray]:
    shapes = arch.layer_shapes()
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.cumsum(sizes)[:-1]
    return [
        part.reshape(shape)
        for part, shape in zip(np.split(theta, offsets), shapes)
    ]


def init_model(arch: Architecture, rng: RngStream) -> BaseLearner:
    """Weights ~ Normal(0, 0.05), biases 0, drawn in flattening order."""
    pieces = []
    for shape in arch.layer_shapes():
        count = int(np.prod(shape))
        if len(shape) == 1:
            pieces.append(np.zeros(count, dtype=np.float64))
        else:
            pieces.append(INIT_STD * rng.standard_normals(count))
    theta = np.concatenate(pieces)
    return BaseLearner(arch, ParameterVector(arch.kind, Tensor(theta)))


def get_params(model: BaseLearner) -> ParameterVector:
    return model.params


def set_params(model: BaseLearner, params: ParameterVector) -> BaseLearner:
    """New learner with the same architecture and the given parameters."""
    if params.kind is not model.architecture.kind:
        raise CompatibilityError(
            f"cannot set {params.kind.value} parameters on a "
            f"{model.architecture.kind.value} model"
        )
    if len(params) != model.architecture.param_count:
        raise CompatibilityError(
            f"expected {model.architecture.param_count} parameters, got {len(params)}"
        )
    return BaseLearner(model.architecture, params)


# --- forward / backward -----------------------------------------------------


def _batch_matrix(arch: Architecture, batch: Tensor) -> np.ndarray:
    """Validate a batch and return it as (m, input_size)."""
    shape = batch.shape
    if len(shape) < 1:
        raise ShapeError(f"batch must have a sample axis, got shape {shape}")
    if shape[1:] not in ((arch.input_size,), arch.input_shape):
        raise ShapeError(
            f"batch shape {shape} does not match architecture input "
            f"{arch.input_shape} (flat size {arch.input_size})"
        )
    return batch.array.reshape(shape[0], arch.input_size)


def _conv_windows(arch: Architecture, x: np.ndarray) -> np.ndarray:
    m = x.shape[0]
    imgs = x.reshape(m, *arch.input_shape)
    ks = arch.conv_size
    return np.lib.stride_tricks.sliding_window_view(imgs, (ks, ks), axis=(1, 2))


def _forward_cache(arch: Architecture, theta: np.ndarray, x: np.ndarray):
    """Probabilities plus the intermediates backprop needs."""
    if arch.kind is ArchKind.LINEAR:
        w, b = _unpack(arch, theta)
        logits = x @ w + b
        return softmax_rows(logits), {}
    if arch.kind is ArchKind.MLP:
        w1, b1, w2, b2 = _unpack(arch, theta)
        z1 = x @ w1 + b1
        a1 = np.maximum(z1, 0.0)
        logits = a1 @ w2 + b2
        return softmax_rows(logits), {"z1": z1, "a1": a1}
    k, bc, w, b = _unpack(arch, theta)
    m = x.shape[0]
    windows = _conv_windows(arch, x)  # (m, ch, cw, c, ks, ks)
    conv = np.einsum("mijckl,klcf->mijf", windows, k, optimize=False) + bc
    act = np.maximum(conv, 0.0)
    ph, pw = conv.shape[1] // 2, conv.shape[2] // 2
    f = conv.shape[3]
    blocks = (
        act[:, : 2 * ph, : 2 * pw, :]
        .reshape(m, ph, 2, pw, 2, f)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(m, ph, pw, f, 4)
    )
    pooled = blocks.max(axis=-1)
    flat = pooled.reshape(m, ph * pw * f)
    logits = flat @ w + b
    return softmax_rows(logits), {
        "windows": windows,
        "conv": conv,
        "blocks": blocks,
        "flat": flat,
        "pool_dims": (ph, pw, f),
    }


def _gradient_arrays(
    arch: Architecture, theta: np.ndarray, x: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    m = x.shape[0]
    probs, cache = _forward_cache(arch, theta, x)
    dlogits = probs.copy()
    dlogits[np.arange(m), labels] -= 1.0
    dlogits /= m

    if arch.kind is ArchKind.LINEAR:
        dw = x.T @ dlogits
        db = dlogits.sum(axis=0)
        return np.concatenate([dw.reshape(-1), db])

    if arch.kind is ArchKind.MLP:
        _, _, w2, _ = _unpack(arch, theta)
        a1, z1 = cache["a1"], cache["z1"]
        dw2 = a1.T @ dlogits
        db2 = dlogits.sum(axis=0)
        dz1 = (dlogits @ w2.T) * (z1 > 0.0)
        dw1 = x.T @ dz1
        db1 = dz1.sum(axis=0)
        return np.concatenate(
            [dw1.reshape(-1), db1, dw2.reshape(-1), db2]
        )

    _, _, w, _ = _unpack(arch, theta)
    windows, conv, blocks = cache["windows"], cache["conv"], cache["blocks"]
    flat = cache["flat"]
    ph, pw, f = cache["pool_dims"]
    dw = flat.T @ dlogits
    db = dlogits.sum(axis=0)
    dpooled = (dlogits @ w.T).reshape(m, ph, pw, f)
    # route each pooled gradient to the first (row-major) maximum in its window
    winners = blocks.argmax(axis=-1)
    dblocks = np.zeros_like(blocks)
    np.put_along_axis(dblocks, winners[..., None], dpooled[..., None], axis=-1)
    dact = np.zeros_like(conv)
    dact[:, : 2 * ph, : 2 * pw, :] = (
        dblocks.reshape(m, ph, pw, f, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(m, 2 * ph, 2 * pw, f)
    )
    dconv = dact * (conv > 0.0)
    dk = np.einsum("mijckl,mijf->klcf", windows, dconv, optimize=False)
    dbc = dconv.sum(axis=(0, 1, 2))
    return np.concatenate([dk.reshape(-1), dbc, dw.reshape(-1), db])


def forward(model: BaseLearner, batch: Tensor) -> Tensor:
    """Per-sample class probabilities, Tensor[m, num_classes]."""
    x = _batch_matrix(model.architecture, batch)
    probs, _ = _forward_cache(model.architecture, model.params.values.data, x)
    return Tensor(probs)


def predict_classes(model: BaseLearner, batch: Tensor) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest class index."""
    return np.argmax(forward(model, batch).array, axis=1)


def _labels_array(labels, m: int, num_classes: int) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.shape != (m,):
        raise ValueError(f"expected {m} labels, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return arr


def cross_entropy(probs: Tensor, labels) -> float:
    """Mean negative log-likelihood; probabilities floored at 1e-12."""
    if len(probs.shape) != 2:
        raise ShapeError(f"probs must be [m, N], got {probs.shape}")
    m, n = probs.shape
    if m < 1:
        raise ValueError("cross_entropy needs at least one sample")
    arr = _labels_array(labels, m, n)
    picked = probs.array[np.arange(m), arr]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def gradient(model: BaseLearner, batch: Tensor, labels) -> ParameterVector:
    """Exact gradient of cross_entropy(forward(...)) in flattening order."""
    x = _batch_matrix(model.architecture, batch)
    arr = _labels_array(labels, x.shape[0], model.num_classes)
    if x.shape[0] < 1:
        raise ValueError("gradient needs at least one sample")
    g = _gradient_arrays(model.architecture, model.params.values.data, x, arr)
    return ParameterVector(model.architecture.kind, Tensor(g))


def _mean_loss(arch: Architecture, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    probs, _ = _forward_cache(arch, theta, x)
    picked = probs[np.arange(x.shape[0]), y]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def train_local(
    model: BaseLearner, train: Dataset, cfg: TrainConfig
) -> tuple[BaseLearner, list[float]]:
    """Shuffled mini-batch SGD; returns the trained model and per-epoch loss.

    Batch order comes from an RngStream named off cfg.seed, so identical
    (model, data, config) always reproduce the same parameters.
    """
    if train.num_samples == 0:
        raise ValueError("cannot train on an empty dataset")
    arch = model.architecture
    x = train.feature_matrix()
    if x.shape[1] != arch.input_size:
        raise ShapeError(
            f"dataset features of size {x.shape[1]} do not match architecture "
            f"input {arch.input_shape} (flat size {arch.input_size})"
        )
    y = train.labels
    rng = RngStream.named(cfg.seed, _TRAIN_SHUFFLE_LABEL)
    theta = model.params.values.data.copy()
    m = train.num_samples
    losses: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(m)
        for start in range(0, m, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            g = _gradient_arrays(arch, theta, x[idx], y[idx])
            theta -= cfg.learning_rate * g
        losses.append(_mean_loss(arch, theta, x, y))
    trained = BaseLearner(arch, ParameterVector(arch.kind, Tensor(theta)))
    return trained, losses


# --- checkpoints -------------------------------------------------------------


def save_model(model: BaseLearner, path) -> None:
    """Checkpoint directory: model.json manifest + params.bin (f64 LE)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arch = model.architecture
    manifest = {
        "format_version": 1,
        "kind": arch.kind.value,
        "input_shape": list(arch.input_shape),
        "num_classes": arch.num_classes,
        "param_count": arch.param_count,
        "params_file": "params.bin",
    }
    if arch.kind is ArchKind.MLP:
        manifest["hidden_width"] = arch.hidden_width
    if arch.kind is ArchKind.CNN:
        manifest["conv_filters"] = arch.conv_filters
        manifest["conv_size"] = arch.conv_size
    (out / _MODEL_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    (out / "params.bin").write_bytes(
        model.params.values.data.astype("<f8").tobytes(order="C")
    )


def load_model(path) -> BaseLearner:
    root = Path(path)
    manifest_path = root / _MODEL_MANIFEST
    if not manifest_path.is_file():
        raise FormatError(f"missing {_MODEL_MANIFEST} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"model manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError("model manifest must be a JSON object")
    if manifest.get("format_version") != 1:
        raise FormatError("manifest field 'format_version' must be 1")
    try:
        kind = ArchKind(manifest.get("kind"))
    except ValueError:
        raise FormatError(
            f"manifest field 'kind' must be one of "
            f"{[k.value for k in ArchKind]}, got {manifest.get('kind')!r}"
        ) from None
    required = {"format_version", "kind", "input_shape", "num_classes", "param_count", "params_file"}
    optional = set()
    if kind is ArchKind.MLP:
        optional = {"hidden_width"}
    if kind is ArchKind.CNN:
        optional = {"conv_filters", "conv_size"}
    unknown = set(manifest) - required - optional
    if unknown:
        raise FormatError(f"unknown model manifest fields: {sorted(unknown)}")
    missing = required - set(manifest)
    if missing:
        raise FormatError(f"missing model manifest fields: {sorted(missing)}")
    try:
        arch = Architecture(
            kind=kind,
            input_shape=tuple(manifest["input_shape"]),
            num_classes=int(manifest["num_classes"]),
            hidden_width=int(manifest.get("hidden_width", 32)),
            conv_filters=int(manifest.get("conv_filters", 4)),
            conv_size=int(manifest.get("conv_size", 3)),
        )
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid architecture in model manifest: {exc}") from exc
    if manifest["param_count"] != arch.param_count:
        raise FormatError(
            f"manifest field 'param_count' is {manifest['param_count']} but the "
            f"architecture implies {arch.param_count}"
        )
    params_path = root / manifest["params_file"]
    if not params_path.is_file():
        raise FormatError(f"manifest field 'params_file' points to missing {params_path}")
    raw = params_path.read_bytes()
    if len(raw) != arch.param_count * 8:
        raise FormatError(
            f"params_file holds {len(raw)} bytes but 'param_count' implies "
            f"{arch.param_count * 8}"
        )
    theta = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if theta.size and not np.isfinite(theta).all():
        raise FormatError("params_file contains non-finite values")
    return BaseLearner(arch, ParameterVector(kind, Tensor(theta)))
