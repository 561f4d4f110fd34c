"""Combining base-learner predictions by majority and weighted-majority vote.

Voting is over hard labels (each member's argmax class). All ties — between
classes in a vote and between classes inside a member's argmax — resolve to
the lowest class index, which keeps every prediction deterministic and
independent of member evaluation order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import CompatibilityError, FormatError
from .models import BaseLearner, Tensor, load_model, predict_classes, save_model

__all__ = [
    "VoteWeights",
    "EnsembleModel",
    "VOTE_METHODS",
    "majority_vote",
    "weighted_vote",
    "ensemble_predict",
    "weights_from_validation",
    "save_ensemble",
    "load_ensemble",
]

WEIGHT_FLOOR = 1e-6
VOTE_METHODS = ("vote", "weighted_vote")

_ENSEMBLE_MANIFEST = "ensemble.json"


@dataclass(frozen=True)
class VoteWeights:
    """Nonnegative per-member weights; at least one must be positive."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("weights must not be empty")
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"weights must be finite and >= 0, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one weight must be positive")

    @classmethod
    def uniform(cls, k: int) -> "VoteWeights":
        return cls((1.0,) * k)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class EnsembleModel:
    """Ordered base learners plus their vote weights."""

    members: tuple[BaseLearner, ...]
    weights: VoteWeights

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if len(self.weights) != len(self.members):
            raise ValueError(
                f"{len(self.members)} members but {len(self.weights)} weights"
            )
        sizes = {m.num_classes for m in self.members}
        if len(sizes) != 1:
            raise CompatibilityError(
                f"members disagree on class count: {sorted(sizes)}"
            )

    @classmethod
    def with_uniform_weights(cls, members: Sequence[BaseLearner]) -> "EnsembleModel":
        members = tuple(members)
        return cls(members, VoteWeights.uniform(len(members)))

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes


def majority_vote(votes: Sequence[int]) -> int:
    """Modal class of the votes; ties break to the lowest class index."""
    votes = np.asarray(votes, dtype=np.int64)
    if votes.size == 0:
        raise ValueError("majority_vote needs at least one vote")
    if votes.min() < 0:
        raise ValueError("votes must be nonnegative class indices")
    counts = np.bincount(votes)
    return int(np.argmax(counts))  # argmax returns the first (lowest) maximum


def weighted_vote(votes: Sequence[int], weights: VoteWeights) -> int:
    """Class maximizing the weight-sum of its voters; ties to lowest index."""
    votes = np.asarray(votes, dtype=np.int64)
    if votes.size != len(weights):
        raise ValueError(
            f"{votes.size} votes but {len(weights)} weights"
        )
    if votes.size == 0:
        raise ValueError("weighted_vote needs at least one vote")
    if votes.min() < 0:
        raise ValueError("votes must be nonnegative class indices")
    scores = np.zeros(int(votes.max()) + 1, dtype=np.float64)
    for vote, weight in zip(votes, weights.values):
        scores[vote] += weight
    return int(np.argmax(scores))


def member_votes(ensemble: EnsembleModel, batch: Tensor) -> np.ndarray:
    """(K, m) argmax predictions, one row per member."""
    return np.stack([predict_classes(m, batch) for m in ensemble.members])


def ensemble_predict(
    ensemble: EnsembleModel, batch: Tensor, method: str = "vote"
) -> np.ndarray:
    """Per-sample ensemble decision: member argmax votes reduced by `method`."""
    if method not in VOTE_METHODS:
        raise ValueError(f"method must be one of {VOTE_METHODS}, got {method!r}")
    votes = member_votes(ensemble, batch)
    if method == "vote":
        return np.array(
            [majority_vote(votes[:, i]) for i in range(votes.shape[1])],
            dtype=np.int64,
        )
    return np.array(
        [weighted_vote(votes[:, i], ensemble.weights) for i in range(votes.shape[1])],
        dtype=np.int64,
    )


def weights_from_validation(
    members: Sequence[BaseLearner], val: Dataset
) -> VoteWeights:
    """Default weighting policy: each member's validation accuracy, floored.

    The floor (1e-6) keeps hopeless members from zeroing the weight vector.
    """
    members = tuple(members)
    if not members:
        raise ValueError("need at least one member")
    if val.num_samples == 0:
        raise ValueError("validation set must not be empty")
    batch = val.features
    weights = []
    for member in members:
        correct = predict_classes(member, batch) == val.labels
        weights.append(max(float(np.mean(correct)), WEIGHT_FLOOR))
    return VoteWeights(tuple(weights))


def save_ensemble(ensemble: EnsembleModel, path, method: str = "vote") -> None:
    """Checkpoint directory: ensemble.json + one member checkpoint per subdir."""
    if method not in VOTE_METHODS:
        raise ValueError(f"method must be one of {VOTE_METHODS}, got {method!r}")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"member_{i}" for i in range(len(ensemble.members))]
    manifest = {
        "format_version": 1,
        "members": names,
        "weights": list(ensemble.weights.values),
        "method": method,
    }
    (out / _ENSEMBLE_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    for name, member in zip(names, ensemble.members):
        save_model(member, out / name)


def load_ensemble(path) -> tuple[EnsembleModel, str]:
    """Load a checkpoint; returns (ensemble, configured vote method)."""
    root = Path(path)
    manifest_path = root / _ENSEMBLE_MANIFEST
    if not manifest_path.is_file():
        raise FormatError(f"missing {_ENSEMBLE_MANIFEST} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"ensemble manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError("ensemble manifest must be a JSON object")
    expected = {"format_version", "members", "weights", "method"}
    unknown = set(manifest) - expected
    if unknown:
        raise FormatError(f"unknown ensemble manifest fields: {sorted(unknown)}")
    missing = expected - set(manifest)
    if missing:
        raise FormatError(f"missing ensemble manifest fields: {sorted(missing)}")
    if manifest["format_version"] != 1:
        raise FormatError("manifest field 'format_version' must be 1")
    names = manifest["members"]
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise FormatError("manifest field 'members' must be a list of directory names")
    if manifest["method"] not in VOTE_METHODS:
        raise FormatError(
            f"manifest field 'method' must be one of {VOTE_METHODS}, "
            f"got {manifest['method']!r}"
        )
    raw_weights = manifest["weights"]
    if not isinstance(raw_weights, list) or len(raw_weights) != len(names):
        raise FormatError("manifest field 'weights' must match 'members' in length")
    try:
        weights = VoteWeights(tuple(float(w) for w in raw_weights))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"manifest field 'weights' is invalid: {exc}") from exc
    members = tuple(load_model(root / name) for name in names)
    return EnsembleModel(members, weights), manifest["method"]
