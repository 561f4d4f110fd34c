"""Datasets, the portable on-disk format, synthetic blobs, splits and shards.

On-disk layout (one directory per dataset):
  manifest.json  format_version, num_samples, feature_shape, dtype ("f32le"),
                 class_names, data_file, labels_file
  data.bin       little-endian float32, row-major, sample-major
  labels.bin     little-endian uint16 class indices

Features are float64 in memory. save_dataset writes float32, so datasets
created by this package (generate_blobs quantizes at creation) round-trip
bit-exactly; foreign values are quantized on save and rejected if they fall
outside float32 range.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics import RngStream, Tensor

__all__ = [
    "DEFAULT_CLASS_NAMES",
    "LabelSpace",
    "Dataset",
    "Partition",
    "generate_blobs",
    "save_dataset",
    "load_dataset",
    "stratified_split",
    "partition_clients",
    "concat_datasets",
]

DEFAULT_CLASS_NAMES = ("glioma", "meningioma", "pituitary", "notumor")

_F32_MAX = float(np.finfo(np.float32).max)
_MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names defining the label indices."""

    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        names = tuple(str(n) for n in self.class_names)
        object.__setattr__(self, "class_names", names)
        if len(names) < 2:
            raise ValueError(f"need at least 2 classes, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be unique: {names}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class Dataset:
    """Immutable labeled sample collection.

    features: Tensor[m, *feature_shape]; labels: int64 array of class indices.
    """

    features: Tensor
    labels: np.ndarray
    label_space: LabelSpace = field(default_factory=LabelSpace)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        labels = np.ascontiguousarray(labels)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1:
            raise ValueError(f"labels must be one-dimensional, got shape {labels.shape}")
        if len(self.features.shape) < 1:
            raise ValueError("features must have a leading sample axis")
        if self.features.shape[0] != labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        n = self.label_space.num_classes
        if labels.size and (labels.min() < 0 or labels.max() >= n):
            raise ValueError(f"labels must lie in [0, {n})")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.features.shape[1:]

    def feature_matrix(self) -> np.ndarray:
        """Read-only (m, prod(feature_shape)) float64 view."""
        return self.features.array.reshape(self.num_samples, -1)

    def take(self, indices) -> "Dataset":
        """New dataset holding the given sample indices, in order."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            Tensor(self.features.array[idx]), self.labels[idx], self.label_space
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.label_space.num_classes)


@dataclass(frozen=True)
class Partition:
    """Per-client shards of one parent dataset."""

    client_shards: tuple[Dataset, ...]

    def __post_init__(self):
        object.__setattr__(self, "client_shards", tuple(self.client_shards))
        if not self.client_shards:
            raise ValueError("a partition needs at least one shard")

    @property
    def num_clients(self) -> int:
        return len(self.client_shards)


def _blob_centers(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Cluster centers at mutual distance >= separation, any dim >= 1.

    dim >= num_classes: regular simplex with edge `separation`, centered at
    the origin (keeps feature magnitudes small). Otherwise: evenly spaced
    along axis 0 at (k - (num_classes-1)/2) * separation.
    """
    centers = np.zeros((num_classes, dim), dtype=np.float64)
    if dim >= num_classes:
        scale = separation / np.sqrt(2.0)
        for k in range(num_classes):
            centers[k, k] = scale
        centers[:, :num_classes] -= scale / num_classes
    else:
        offsets = (np.arange(num_classes) - (num_classes - 1) / 2.0) * separation
        centers[:, 0] = offsets
    return centers


def generate_blobs(
    rng: RngStream, per_class: int, dim: int, separation: float
) -> Dataset:
    """Synthetic 4-class dataset: unit-variance Gaussian clusters.

    Samples are class-major (all of class 0 first). Features are quantized to
    float32-representable doubles so the dataset round-trips the disk format
    exactly.
    """
    per_class = int(per_class)
    dim = int(dim)
    separation = float(separation)
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    space = LabelSpace()
    n = space.num_classes
    centers = _blob_centers(n, dim, separation)
    features = np.empty((n * per_class, dim), dtype=np.float64)
    labels = np.repeat(np.arange(n, dtype=np.int64), per_class)
    for k in range(n):
        noise = rng.standard_normals(per_class * dim).reshape(per_class, dim)
        features[k * per_class : (k + 1) * per_class] = centers[k] + noise
    features = features.astype(np.float32).astype(np.float64)
    return Dataset(Tensor(features), labels, space)


def save_dataset(dataset: Dataset, path) -> None:
    """Write the dataset directory (manifest.json + data.bin + labels.bin)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    feats = dataset.features.array
    if feats.size and float(np.abs(feats).max()) > _F32_MAX:
        raise ValueError("feature magnitudes exceed float32 range; cannot serialize")
    if dataset.label_space.num_classes > 0xFFFF:
        raise ValueError("more than 65535 classes cannot be serialized as uint16")
    manifest = {
        "format_version": 1,
        "num_samples": dataset.num_samples,
        "feature_shape": list(dataset.feature_shape),
        "dtype": "f32le",
        "class_names": list(dataset.label_space.class_names),
        "data_file": "data.bin",
        "labels_file": "labels.bin",
    }
    (out / _MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    (out / "data.bin").write_bytes(feats.astype("<f4").tobytes(order="C"))
    (out / "labels.bin").write_bytes(dataset.labels.astype("<u2").tobytes(order="C"))


_MANIFEST_FIELDS = {
    "format_version",
    "num_samples",
    "feature_shape",
    "dtype",
    "class_names",
    "data_file",
    "labels_file",
}


def _manifest_int(manifest: dict, key: str, minimum: int = 0) -> int:
    value = manifest.get(key)
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise FormatError(f"manifest field '{key}' must be an integer >= {minimum}")
    return value


def load_dataset(path) -> Dataset:
    """Read a dataset directory; raises FormatError naming the offending field."""
    root = Path(path)
    manifest_path = root / _MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"missing {_MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object")
    unknown = set(manifest) - _MANIFEST_FIELDS
    if unknown:
        raise FormatError(f"unknown manifest fields: {sorted(unknown)}")
    missing = _MANIFEST_FIELDS - set(manifest)
    if missing:
        raise FormatError(f"missing manifest fields: {sorted(missing)}")
    if manifest["format_version"] != 1:
        raise FormatError(
            f"manifest field 'format_version' must be 1, got {manifest['format_version']!r}"
        )
    if manifest["dtype"] != "f32le":
        raise FormatError(
            f"manifest field 'dtype' must be 'f32le', got {manifest['dtype']!r}"
        )
    num_samples = _manifest_int(manifest, "num_samples")
    shape = manifest["feature_shape"]
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)
    ):
        raise FormatError(
            "manifest field 'feature_shape' must be a non-empty list of positive integers"
        )
    names = manifest["class_names"]
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise FormatError("manifest field 'class_names' must be a list of strings")
    space = LabelSpace(tuple(names))
    for key in ("data_file", "labels_file"):
        if not isinstance(manifest[key], str):
            raise FormatError(f"manifest field '{key}' must be a string")

    feature_size = int(np.prod(shape))
    data_path = root / manifest["data_file"]
    if not data_path.is_file():
        raise FormatError(f"manifest field 'data_file' points to missing {data_path}")
    raw = data_path.read_bytes()
    expected = num_samples * feature_size * 4
    if len(raw) != expected:
        raise FormatError(
            f"data_file holds {len(raw)} bytes but manifest 'num_samples' "
            f"and 'feature_shape' imply {expected}"
        )
    feats32 = np.frombuffer(raw, dtype="<f4").reshape((num_samples, *shape))
    feats = feats32.astype(np.float64)
    if feats.size and not np.isfinite(feats).all():
        raise FormatError("data_file contains non-finite values")

    labels_path = root / manifest["labels_file"]
    if not labels_path.is_file():
        raise FormatError(f"manifest field 'labels_file' points to missing {labels_path}")
    raw_labels = labels_path.read_bytes()
    if len(raw_labels) != num_samples * 2:
        raise FormatError(
            f"labels_file holds {len(raw_labels)} bytes but manifest "
            f"'num_samples' implies {num_samples * 2}"
        )
    labels = np.frombuffer(raw_labels, dtype="<u2").astype(np.int64)
    if labels.size and labels.max() >= space.num_classes:
        raise FormatError(
            f"labels_file contains index {labels.max()} outside the "
            f"{space.num_classes} declared class_names"
        )
    return Dataset(Tensor(feats), labels, space)


def concat_datasets(datasets) -> Dataset:
    """Concatenate datasets (same label space and feature shape), in order."""
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    space = datasets[0].label_space
    shape = datasets[0].feature_shape
    for d in datasets[1:]:
        if d.label_space != space:
            raise ValueError("datasets disagree on the label space")
        if d.feature_shape != shape:
            raise ValueError(
                f"datasets disagree on feature shape: {shape} vs {d.feature_shape}"
            )
    feats = np.concatenate([d.features.array for d in datasets], axis=0)
    labels = np.concatenate([d.labels for d in datasets])
    return Dataset(Tensor(feats), labels, space)


def _per_class_indices(dataset: Dataset) -> list[np.ndarray]:
    labels = dataset.labels
    return [
        np.nonzero(labels == k)[0]
        for k in range(dataset.label_space.num_classes)
    ]


def stratified_split(
    dataset: Dataset, train_fraction: float, rng: RngStream
) -> tuple[Dataset, Dataset]:
    """Per-class split: floor(train_fraction * count) to train, rest to test.

    Samples are shuffled within each class before the cut; both outputs are
    class-major.
    """
    train_fraction = float(train_fraction)
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for k, idx in enumerate(_per_class_indices(dataset)):
        if idx.size == 0:
            raise ValueError(
                f"class '{dataset.label_space.class_names[k]}' has 0 samples"
            )
        shuffled = idx[rng.permutation(idx.size)]
        cut = int(np.floor(train_fraction * idx.size))
        train_idx.append(shuffled[:cut])
        test_idx.append(shuffled[cut:])
    return (
        dataset.take(np.concatenate(train_idx)),
        dataset.take(np.concatenate(test_idx)),
    )


def partition_clients(dataset: Dataset, num_clients: int, rng: RngStream) -> Partition:
    """Stratified IID shards: per-class shuffle, then one round-robin deal.

    The shuffled classes are concatenated in class order and the whole
    sequence is dealt round-robin, the deal continuing across class
    boundaries. Each class occupies consecutive deal positions, so its
    per-shard counts differ by at most 1.
    """
    num_clients = int(num_clients)
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    if dataset.num_samples < num_clients:
        raise ValueError(
            f"cannot deal {dataset.num_samples} samples to {num_clients} clients"
        )
    shuffled = [
        idx[rng.permutation(idx.size)] for idx in _per_class_indices(dataset)
    ]
    order = np.concatenate(shuffled)
    shards = tuple(
        dataset.take(order[j::num_clients]) for j in range(num_clients)
    )
    return Partition(shards)
