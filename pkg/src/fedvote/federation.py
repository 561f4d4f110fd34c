"""Three-phase protocol: distribute shards, train client ensembles, aggregate.

One round = every client trains its members locally, ships flat parameters
plus its sample count to the (in-process) server, the server forms the
sample-count-weighted average per architecture kind, and the averaged
ensemble is broadcast back. Two global predictors are available: the
averaged ensemble itself (default) or the per-sample mode over the client
ensembles' predictions.

All randomness fans out from one root seed through named streams, and the
client/server exchange is an in-process message contract, so a run replays
byte-identically — sequentially or with concurrent clients.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, concat_datasets, generate_blobs, load_dataset, partition_clients, stratified_split
from .ensemble import (
    VOTE_METHODS,
    EnsembleModel,
    ensemble_predict,
    majority_vote,
    weights_from_validation,
)
from .errors import CompatibilityError, ConfigError
from .metrics import MetricsReport, confusion, report, report_to_dict
from .models import (
    ArchKind,
    Architecture,
    BaseLearner,
    ParameterVector,
    Tensor,
    TrainConfig,
    architecture_for,
    cross_entropy,
    forward,
    get_params,
    init_model,
    set_params,
    train_local,
)
from .numerics import RngStream, derive_seed

__all__ = [
    "Strategy",
    "SyntheticSpec",
    "RunSpec",
    "spec_from_dict",
    "ClientState",
    "ClientUpdate",
    "GlobalModel",
    "RoundRecord",
    "FederationResult",
    "distribute",
    "client_round",
    "fedavg_vectors",
    "aggregate_fedavg",
    "global_predict",
    "run_federation",
    "evaluate_model",
    "evaluate_ensemble",
    "write_rounds_jsonl",
]

CLIENT_VAL_FRACTION = 0.1
DEFAULT_MEMBERS = (ArchKind.LINEAR, ArchKind.MLP, ArchKind.CNN)


class Strategy(str, Enum):
    FEDAVG_ENSEMBLE = "fedavg_ensemble"
    MODE_OF_CLIENT_ENSEMBLES = "mode_of_client_ensembles"


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the built-in blob generator."""

    per_class: int = 500
    dim: int = 16
    separation: float = 6.0


@dataclass(frozen=True)
class ClientState:
    """One simulated site: its shard (split into train/val) and its ensemble."""

    client_id: int
    train_set: Dataset
    val_set: Dataset
    ensemble: EnsembleModel | None = None

    def __post_init__(self):
        if self.client_id < 0:
            raise ValueError(f"client_id must be >= 0, got {self.client_id}")


@dataclass(frozen=True)
class ClientUpdate:
    """What a client ships to the server after a local round."""

    client_id: int
    params: tuple[ParameterVector, ...]
    sample_count: int
    val_metrics: MetricsReport

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if self.sample_count <= 0:
            raise ValueError(f"sample_count must be positive, got {self.sample_count}")
        kinds = [p.kind for p in self.params]
        if not kinds:
            raise ValueError("an update needs at least one parameter vector")
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate architecture kinds in update: {kinds}")

    def params_by_kind(self) -> dict[ArchKind, ParameterVector]:
        return {p.kind: p for p in self.params}


@dataclass(frozen=True)
class GlobalModel:
    """Server-side aggregate: averaged ensemble plus the prediction strategy."""

    ensemble: EnsembleModel
    strategy: Strategy = Strategy.FEDAVG_ENSEMBLE

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    sample_count: int
    val_metrics: MetricsReport


@dataclass(frozen=True)
class RoundRecord:
    """Log entry for one communication round.

    wall_time_s is informational only and excluded from serialization so that
    reruns of the same seed produce byte-identical round logs.
    """

    round_index: int
    clients: tuple[ClientReport, ...]
    global_val_metrics: MetricsReport
    wall_time_s: float = 0.0

    def __post_init__(self):
        if self.round_index < 1:
            raise ValueError(f"round_index must be >= 1, got {self.round_index}")

    def to_json_dict(self) -> dict:
        return {
            "round": self.round_index,
            "clients": [
                {
                    "client_id": c.client_id,
                    "sample_count": c.sample_count,
                    "val_metrics": report_to_dict(c.val_metrics),
                }
                for c in self.clients
            ],
            "global_val_metrics": report_to_dict(self.global_val_metrics),
        }


@dataclass(frozen=True)
class FederationResult:
    """Everything a run produced; .rounds is the round-by-round log."""

    rounds: tuple[RoundRecord, ...]
    round_globals: tuple[GlobalModel, ...]
    clients: tuple[ClientState, ...]
    pooled_train: Dataset
    pooled_val: Dataset
    table_rows: tuple[tuple[str, MetricsReport, MetricsReport], ...]

    @property
    def global_model(self) -> GlobalModel:
        return self.round_globals[-1]


# --- evaluation helpers -----------------------------------------------------


def evaluate_model(model: BaseLearner, ds: Dataset) -> MetricsReport:
    """Metric suite of a single learner on a dataset (loss = cross-entropy)."""
    probs = forward(model, ds.features)
    preds = np.argmax(probs.array, axis=1)
    cm = confusion(ds.labels, preds, ds.label_space)
    return report(cm, mean_loss=cross_entropy(probs, ds.labels))


def _mean_member_loss(members: Sequence[BaseLearner], ds: Dataset) -> float:
    losses = [
        cross_entropy(forward(m, ds.features), ds.labels) for m in members
    ]
    return float(np.mean(losses))


def evaluate_ensemble(
    ensemble: EnsembleModel, ds: Dataset, method: str = "vote"
) -> MetricsReport:
    """Metric suite of a voting ensemble on a dataset.

    Voting yields no probabilities, so the reported loss is the mean of the
    members' cross-entropy losses on the same data.
    """
    preds = ensemble_predict(ensemble, ds.features, method=method)
    cm = confusion(ds.labels, preds, ds.label_space)
    return report(cm, mean_loss=_mean_member_loss(ensemble.members, ds))


# --- protocol operations ----------------------------------------------------


def distribute(data: Dataset, num_clients: int, rng: RngStream) -> list[ClientState]:
    """Deal stratified shards to clients, each with a 90/10 train/val sub-split."""
    partition = partition_clients(data, num_clients, rng)
    clients = []
    for cid, shard in enumerate(partition.client_shards):
        train_set, val_set = stratified_split(shard, 1.0 - CLIENT_VAL_FRACTION, rng)
        clients.append(ClientState(cid, train_set, val_set))
    return clients


def client_round(
    client: ClientState, cfg: TrainConfig, vote_method: str = "vote"
) -> ClientUpdate:
    """Train every ensemble member on the client's shard and package the update.

    Per-member batch orders derive from cfg.seed and the member kind only, so
    two clients given identical data and config produce identical updates.
    """
    if client.ensemble is None:
        raise ValueError(f"client {client.client_id}: no ensemble to train")
    try:
        trained = []
        for member in client.ensemble.members:
            member_cfg = replace(
                cfg, seed=derive_seed(cfg.seed, f"member/{member.architecture.kind.value}")
            )
            model, _ = train_local(member, client.train_set, member_cfg)
            trained.append(model)
        weights = weights_from_validation(trained, client.val_set)
        trained_ensemble = EnsembleModel(tuple(trained), weights)
        val_metrics = evaluate_ensemble(trained_ensemble, client.val_set, vote_method)
    except Exception as exc:
        try:
            raise type(exc)(f"client {client.client_id}: {exc}") from exc
        except TypeError:
            raise exc from None
    return ClientUpdate(
        client_id=client.client_id,
        params=tuple(get_params(m) for m in trained),
        sample_count=client.train_set.num_samples,
        val_metrics=val_metrics,
    )


def fedavg_vectors(vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean of equal-length vectors, accumulated in the given order.

    Computed as base + sum(w_i * (v_i - base)) / sum(w_i) with base = the
    first vector, which is algebraically the weighted mean but bitwise exact
    when every input is identical (averaging equal clients must be a no-op).
    """
    if not vectors:
        raise ValueError("need at least one vector")
    if len(vectors) != len(weights):
        raise ValueError(f"{len(vectors)} vectors but {len(weights)} weights")
    total = float(sum(weights))
    if total <= 0:
        raise ValueError(f"weights must sum to a positive value, got {total}")
    base = np.asarray(vectors[0], dtype=np.float64)
    acc = np.zeros_like(base)
    for vec, w in zip(vectors, weights):
        acc += float(w) * (np.asarray(vec, dtype=np.float64) - base)
    return base + acc / total


def aggregate_fedavg(
    updates: Sequence[ClientUpdate],
    architectures: Sequence[Architecture],
    strategy: Strategy = Strategy.FEDAVG_ENSEMBLE,
) -> GlobalModel:
    """Sample-count-weighted average of client parameters, per architecture kind.

    Updates are reduced in ascending client_id order so the result is
    independent of arrival order. The averaged members form the global
    ensemble with uniform vote weights.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ValueError("aggregate_fedavg needs at least one update")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in updates: {ids}")
    arch_by_kind: dict[ArchKind, Architecture] = {}
    for arch in architectures:
        if arch.kind in arch_by_kind:
            raise ValueError(f"duplicate architecture kind {arch.kind.value}")
        arch_by_kind[arch.kind] = arch

    reference = updates[0].params_by_kind()
    if set(reference) != set(arch_by_kind):
        raise CompatibilityError(
            f"client {updates[0].client_id} covers kinds "
            f"{sorted(k.value for k in reference)} but the server expects "
            f"{sorted(k.value for k in arch_by_kind)}"
        )
    for update in updates[1:]:
        kinds = update.params_by_kind()
        if set(kinds) != set(reference):
            raise CompatibilityError(
                f"client {update.client_id} covers kinds "
                f"{sorted(k.value for k in kinds)}, expected "
                f"{sorted(k.value for k in reference)}"
            )
        for kind, vec in kinds.items():
            if len(vec) != len(reference[kind]):
                raise CompatibilityError(
                    f"client {update.client_id} sent {len(vec)} parameters for "
                    f"{kind.value}, expected {len(reference[kind])}"
                )

    weights = [float(u.sample_count) for u in updates]
    members = []
    for kind, arch in arch_by_kind.items():
        vectors = [u.params_by_kind()[kind].values.data for u in updates]
        averaged = fedavg_vectors(vectors, weights)
        members.append(BaseLearner(arch, ParameterVector(kind, Tensor(averaged))))
    return GlobalModel(EnsembleModel.with_uniform_weights(members), strategy)


def global_predict(
    model: GlobalModel, clients: Sequence[ClientState], batch: Tensor
) -> np.ndarray:
    """Class predictions of the global model under its strategy."""
    if model.strategy is Strategy.FEDAVG_ENSEMBLE:
        return ensemble_predict(model.ensemble, batch, method="vote")
    if not clients:
        raise ValueError("mode_of_client_ensembles needs at least one client")
    per_client = []
    for client in clients:
        if client.ensemble is None:
            raise ValueError(f"client {client.client_id} has no ensemble")
        per_client.append(ensemble_predict(client.ensemble, batch, method="vote"))
    stacked = np.stack(per_client)  # (P, m)
    return np.array(
        [majority_vote(stacked[:, i]) for i in range(stacked.shape[1])],
        dtype=np.int64,
    )


def _global_metrics(
    model: GlobalModel, clients: Sequence[ClientState], ds: Dataset
) -> MetricsReport:
    preds = global_predict(model, clients, ds.features)
    cm = confusion(ds.labels, preds, ds.label_space)
    if model.strategy is Strategy.FEDAVG_ENSEMBLE:
        loss = _mean_member_loss(model.ensemble.members, ds)
    else:
        members = [m for c in clients for m in c.ensemble.members]
        loss = _mean_member_loss(members, ds)
    return report(cm, mean_loss=loss)


# --- run configuration -------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    """Validated configuration of one federation run."""

    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    dataset_path: str | None = None
    clients: int = 4
    rounds: int = 1
    strategy: Strategy = Strategy.FEDAVG_ENSEMBLE
    members: tuple[ArchKind, ...] = DEFAULT_MEMBERS
    vote_method: str = "vote"
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    output_dir: str | None = None
    parallel_clients: bool = False

    def __post_init__(self):
        if (self.synthetic is None) == (self.dataset_path is None):
            raise ConfigError("exactly one of synthetic spec or dataset path is required")
        if self.clients < 1:
            raise ConfigError(f"clients must be >= 1, got {self.clients}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if not self.members:
            raise ConfigError("members must not be empty")
        kinds = [ArchKind(m) for m in self.members]
        if len(set(kinds)) != len(kinds):
            raise ConfigError(f"duplicate member kinds: {[k.value for k in kinds]}")
        object.__setattr__(self, "members", tuple(kinds))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.vote_method not in VOTE_METHODS:
            raise ConfigError(
                f"vote_method must be one of {VOTE_METHODS}, got {self.vote_method!r}"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be a 64-bit unsigned value, got {self.seed}")


def _check_int(errors: list[str], payload: Mapping, key: str, minimum: int) -> None:
    if key not in payload:
        return
    value = payload[key]
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        errors.append(f"'{key}' must be an integer >= {minimum}, got {value!r}")


def spec_from_dict(payload: Mapping) -> RunSpec:
    """Build a RunSpec from a JSON-shaped mapping, reporting every problem at once.

    Unknown keys anywhere in the document are rejected, not ignored.
    """
    errors: list[str] = []
    top_keys = {
        "dataset",
        "clients",
        "rounds",
        "strategy",
        "members",
        "vote_method",
        "train",
        "seed",
        "output_dir",
        "parallel_clients",
    }
    unknown = set(payload) - top_keys
    if unknown:
        errors.append(f"unknown config keys: {sorted(unknown)}")

    synthetic: SyntheticSpec | None = SyntheticSpec()
    dataset_path: str | None = None
    dataset = payload.get("dataset")
    if dataset is not None:
        if not isinstance(dataset, Mapping):
            errors.append("'dataset' must be an object")
        else:
            sub_unknown = set(dataset) - {"path", "synthetic"}
            if sub_unknown:
                errors.append(f"unknown 'dataset' keys: {sorted(sub_unknown)}")
            if "path" in dataset and "synthetic" in dataset:
                errors.append("'dataset' must give either 'path' or 'synthetic', not both")
            elif "path" in dataset:
                if not isinstance(dataset["path"], str):
                    errors.append("'dataset.path' must be a string")
                else:
                    dataset_path = dataset["path"]
                    synthetic = None
            elif "synthetic" in dataset:
                blob = dataset["synthetic"]
                if not isinstance(blob, Mapping):
                    errors.append("'dataset.synthetic' must be an object")
                else:
                    blob_unknown = set(blob) - {"per_class", "dim", "separation"}
                    if blob_unknown:
                        errors.append(
                            f"unknown 'dataset.synthetic' keys: {sorted(blob_unknown)}"
                        )
                    blob_errors: list[str] = []
                    _check_int(blob_errors, blob, "per_class", 1)
                    _check_int(blob_errors, blob, "dim", 1)
                    sep = blob.get("separation", 6.0)
                    if not isinstance(sep, (int, float)) or isinstance(sep, bool) or not sep > 0:
                        blob_errors.append(f"'separation' must be a number > 0, got {sep!r}")
                    if blob_errors:
                        errors.extend(f"dataset.synthetic: {e}" for e in blob_errors)
                    else:
                        synthetic = SyntheticSpec(
                            per_class=int(blob.get("per_class", 500)),
                            dim=int(blob.get("dim", 16)),
                            separation=float(sep),
                        )
            else:
                errors.append("'dataset' must give 'path' or 'synthetic'")

    _check_int(errors, payload, "clients", 1)
    _check_int(errors, payload, "rounds", 1)
    _check_int(errors, payload, "seed", 0)

    strategy = payload.get("strategy", Strategy.FEDAVG_ENSEMBLE.value)
    if strategy not in [s.value for s in Strategy]:
        errors.append(
            f"'strategy' must be one of {[s.value for s in Strategy]}, got {strategy!r}"
        )
    vote_method = payload.get("vote_method", "vote")
    if vote_method not in VOTE_METHODS:
        errors.append(f"'vote_method' must be one of {VOTE_METHODS}, got {vote_method!r}")

    members = payload.get("members", [k.value for k in DEFAULT_MEMBERS])
    valid_kinds = [k.value for k in ArchKind]
    if (
        not isinstance(members, list)
        or not members
        or not all(isinstance(m, str) and m in valid_kinds for m in members)
    ):
        errors.append(f"'members' must be a non-empty list drawn from {valid_kinds}")
        members = [k.value for k in DEFAULT_MEMBERS]
    elif len(set(members)) != len(members):
        errors.append(f"'members' must not repeat kinds, got {members}")

    train_payload = payload.get("train", {})
    train = TrainConfig()
    if not isinstance(train_payload, Mapping):
        errors.append("'train' must be an object")
    else:
        train_unknown = set(train_payload) - {"learning_rate", "epochs", "batch_size"}
        if train_unknown:
            errors.append(f"unknown 'train' keys: {sorted(train_unknown)}")
        else:
            try:
                train = TrainConfig(
                    learning_rate=float(train_payload.get("learning_rate", 0.05)),
                    epochs=int(train_payload.get("epochs", 20)),
                    batch_size=int(train_payload.get("batch_size", 32)),
                )
            except (TypeError, ValueError) as exc:
                errors.append(f"train: {exc}")

    output_dir = payload.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        errors.append("'output_dir' must be a string")
    parallel = payload.get("parallel_clients", False)
    if not isinstance(parallel, bool):
        errors.append("'parallel_clients' must be a boolean")

    if errors:
        raise ConfigError("invalid run config:\n" + "\n".join(f"  - {e}" for e in errors))
    return RunSpec(
        synthetic=synthetic,
        dataset_path=dataset_path,
        clients=int(payload.get("clients", 4)),
        rounds=int(payload.get("rounds", 1)),
        strategy=Strategy(strategy),
        members=tuple(ArchKind(m) for m in members),
        vote_method=vote_method,
        train=train,
        seed=int(payload.get("seed", 0)),
        output_dir=output_dir,
        parallel_clients=parallel,
    )


# --- the main loop -----------------------------------------------------------

_MEMBER_DISPLAY = {
    ArchKind.LINEAR: "Linear",
    ArchKind.MLP: "MLP",
    ArchKind.CNN: "CNN",
}


def _load_run_dataset(spec: RunSpec) -> Dataset:
    if spec.dataset_path is not None:
        return load_dataset(spec.dataset_path)
    blob = spec.synthetic
    rng = RngStream.named(spec.seed, "data/blobs")
    return generate_blobs(rng, blob.per_class, blob.dim, blob.separation)


def run_federation(spec: RunSpec) -> FederationResult:
    """Execute the full protocol for spec.rounds rounds; pure in-memory."""
    data = _load_run_dataset(spec)
    try:
        architectures = tuple(
            architecture_for(kind, data.feature_shape, data.label_space.num_classes)
            for kind in spec.members
        )
    except ValueError as exc:
        raise ConfigError(f"members incompatible with the dataset: {exc}") from exc

    clients = distribute(data, spec.clients, RngStream.named(spec.seed, "data/distribute"))
    clients = [
        replace(
            c,
            ensemble=EnsembleModel.with_uniform_weights(
                tuple(
                    init_model(
                        arch,
                        RngStream.named(
                            spec.seed, f"init/client{c.client_id}/{arch.kind.value}"
                        ),
                    )
                    for arch in architectures
                )
            ),
        )
        for c in clients
    ]
    pooled_train = concat_datasets([c.train_set for c in clients])
    pooled_val = concat_datasets([c.val_set for c in clients])

    records: list[RoundRecord] = []
    round_globals: list[GlobalModel] = []
    for round_index in range(1, spec.rounds + 1):
        started = time.perf_counter()
        cfgs = [
            replace(
                spec.train,
                seed=derive_seed(spec.seed, f"round{round_index}/client{c.client_id}"),
            )
            for c in clients
        ]
        if spec.parallel_clients and len(clients) > 1:
            with ThreadPoolExecutor(max_workers=len(clients)) as pool:
                updates = list(
                    pool.map(
                        lambda pair: client_round(pair[0], pair[1], spec.vote_method),
                        zip(clients, cfgs),
                    )
                )
        else:
            updates = [
                client_round(c, cfg, spec.vote_method) for c, cfg in zip(clients, cfgs)
            ]

        trained_clients = []
        for client, update in zip(clients, updates):
            members = tuple(
                set_params(member, vec)
                for member, vec in zip(client.ensemble.members, update.params)
            )
            weights = weights_from_validation(members, client.val_set)
            trained_clients.append(
                replace(client, ensemble=EnsembleModel(members, weights))
            )
        clients = trained_clients

        global_model = aggregate_fedavg(updates, architectures, spec.strategy)
        round_globals.append(global_model)
        records.append(
            RoundRecord(
                round_index=round_index,
                clients=tuple(
                    ClientReport(u.client_id, u.sample_count, u.val_metrics)
                    for u in updates
                ),
                global_val_metrics=_global_metrics(global_model, clients, pooled_val),
                wall_time_s=time.perf_counter() - started,
            )
        )

        if round_index < spec.rounds:
            clients = [
                replace(
                    c,
                    ensemble=EnsembleModel.with_uniform_weights(
                        global_model.ensemble.members
                    ),
                )
                for c in clients
            ]

    global_model = round_globals[-1]
    representative = clients[0]
    table_rows: list[tuple[str, MetricsReport, MetricsReport]] = [
        (
            "Global Model (FL)",
            _global_metrics(global_model, clients, pooled_train),
            _global_metrics(global_model, clients, pooled_val),
        )
    ]
    for member in representative.ensemble.members:
        table_rows.append(
            (
                _MEMBER_DISPLAY[member.architecture.kind],
                evaluate_model(member, representative.train_set),
                evaluate_model(member, pooled_val),
            )
        )
    table_rows.append(
        (
            "Ensemble Model",
            evaluate_ensemble(representative.ensemble, representative.train_set, spec.vote_method),
            evaluate_ensemble(representative.ensemble, pooled_val, spec.vote_method),
        )
    )
    return FederationResult(
        rounds=tuple(records),
        round_globals=tuple(round_globals),
        clients=tuple(clients),
        pooled_train=pooled_train,
        pooled_val=pooled_val,
        table_rows=tuple(table_rows),
    )


def rounds_to_jsonl(records: Sequence[RoundRecord]) -> str:
    """One JSON object per line; deterministic bytes for equal records."""
    return "".join(json.dumps(r.to_json_dict()) + "\n" for r in records)


def write_rounds_jsonl(records: Sequence[RoundRecord], path) -> None:
    Path(path).write_text(rounds_to_jsonl(records))
