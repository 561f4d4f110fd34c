"""Desk-scale federated learning with per-client voting ensembles.

Simulates the full protocol in one process: a labeled dataset is dealt to P
clients, each client trains a small heterogeneous ensemble (linear, MLP and
CNN classifiers written from scratch), the server averages parameters per
architecture weighted by client sample counts, and predictions come from
majority or weighted-majority voting. Everything is seeded and replayable.
"""

from .numerics import RngStream, Tensor, derive_seed, rng_normal
from .data import Dataset, LabelSpace, Partition, generate_blobs, load_dataset, save_dataset
from .models import (
    ArchKind,
    Architecture,
    BaseLearner,
    ParameterVector,
    TrainConfig,
    cross_entropy,
    forward,
    get_params,
    gradient,
    init_model,
    set_params,
    train_local,
)
from .ensemble import (
    EnsembleModel,
    VoteWeights,
    ensemble_predict,
    majority_vote,
    weighted_vote,
    weights_from_validation,
)
from .metrics import ConfusionMatrix, MetricsReport, confusion, render_table, report
from .federation import (
    ClientState,
    ClientUpdate,
    GlobalModel,
    RoundRecord,
    RunSpec,
    Strategy,
    aggregate_fedavg,
    client_round,
    distribute,
    global_predict,
    run_federation,
)

__version__ = "0.1.0"
