"""Command-line entry point: generate, partition, run, evaluate, predict.

Exit codes are a stable contract: 0 success, 1 runtime failure, 2 usage or
config error. Flags override config-file values; FEDVOTE_SEED is the seed
fallback when neither a flag nor the config provides one. All subcommands
are idempotent given identical inputs and seeds.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import generate_blobs, load_dataset, partition_clients, save_dataset
from .ensemble import ensemble_predict, load_ensemble, save_ensemble
from .errors import CompatibilityError, ConfigError, FormatError, ShapeError
from .federation import run_federation, spec_from_dict, write_rounds_jsonl
from .metrics import confusion, render_table, report, write_confusion_csv, write_report_json
from .models import cross_entropy, forward, load_model
from .numerics import RngStream

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

SEED_ENV_VAR = "FEDVOTE_SEED"


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None
    if seed < 0:
        raise ConfigError(f"{SEED_ENV_VAR} must be >= 0, got {seed}")
    return seed


def _resolve_seed(flag_value: int | None) -> int:
    if flag_value is not None:
        return flag_value
    env = _env_seed()
    return 0 if env is None else env


def _cmd_generate(args) -> int:
    if args.per_class < 1:
        raise ConfigError(f"--per-class must be >= 1, got {args.per_class}")
    if args.dim < 1:
        raise ConfigError(f"--dim must be >= 1, got {args.dim}")
    if not args.separation > 0:
        raise ConfigError(f"--separation must be > 0, got {args.separation}")
    seed = _resolve_seed(args.seed)
    dataset = generate_blobs(
        RngStream.named(seed, "data/blobs"), args.per_class, args.dim, args.separation
    )
    save_dataset(dataset, args.out)
    print(
        f"wrote {dataset.num_samples} samples "
        f"({args.per_class} per class, dim {args.dim}) to {args.out}"
    )
    return EXIT_OK


def _cmd_partition(args) -> int:
    if args.clients < 1:
        raise ConfigError(f"--clients must be >= 1, got {args.clients}")
    seed = _resolve_seed(args.seed)
    dataset = load_dataset(args.dataset)
    partition = partition_clients(
        dataset, args.clients, RngStream.named(seed, "data/partition")
    )
    out = Path(args.out)
    for cid, shard in enumerate(partition.client_shards):
        save_dataset(shard, out / f"client_{cid}")
    sizes = [s.num_samples for s in partition.client_shards]
    print(f"wrote {args.clients} shards of sizes {sizes} to {out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    payload: dict = {}
    if args.config is not None:
        config_path = Path(args.config)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            payload = json.loads(config_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("config file must hold a JSON object")
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.clients is not None:
        payload["clients"] = args.clients
    if args.rounds is not None:
        payload["rounds"] = args.rounds
    if args.strategy is not None:
        payload["strategy"] = args.strategy
    if args.out is not None:
        payload["output_dir"] = args.out
    if args.parallel_clients is not None:
        payload["parallel_clients"] = args.parallel_clients
    if "seed" not in payload:
        env = _env_seed()
        if env is not None:
            payload["seed"] = env

    spec = spec_from_dict(payload)
    if spec.output_dir is None:
        raise ConfigError("an output directory is required: pass --out or set output_dir")
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    result = run_federation(spec)
    write_rounds_jsonl(result.rounds, out / "rounds.jsonl")
    for record, global_model in zip(result.rounds, result.round_globals):
        save_ensemble(
            global_model.ensemble,
            out / f"round_{record.round_index:04d}" / "global_model",
            method=spec.vote_method,
        )
    print(render_table(result.table_rows), end="")
    print(f"\nwrote {len(result.rounds)} round record(s) to {out / 'rounds.jsonl'}")
    return EXIT_OK


def _load_checkpoint(path: Path):
    """(kind, payload): ('ensemble', (model, method)) or ('model', model)."""
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if (path / "ensemble.json").is_file():
        return "ensemble", load_ensemble(path)
    if (path / "model.json").is_file():
        return "model", load_model(path)
    raise FormatError(f"{path} holds neither ensemble.json nor model.json")


def _checkpoint_predictions(kind, payload, dataset):
    """Predictions and mean loss of a loaded checkpoint on a dataset."""
    if kind == "ensemble":
        model, method = payload
        preds = ensemble_predict(model, dataset.features, method=method)
        losses = [
            cross_entropy(forward(m, dataset.features), dataset.labels)
            for m in model.members
        ]
        return preds, float(np.mean(losses))
    probs = forward(payload, dataset.features)
    return np.argmax(probs.array, axis=1), cross_entropy(probs, dataset.labels)


def _cmd_evaluate(args) -> int:
    kind, payload = _load_checkpoint(Path(args.model))
    dataset = load_dataset(args.dataset)
    preds, mean_loss = _checkpoint_predictions(kind, payload, dataset)
    cm = confusion(dataset.labels, preds, dataset.label_space)
    rep = report(cm, mean_loss=mean_loss)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(rep, out / "report.json")
    write_confusion_csv(cm, out / "confusion.csv")
    print(
        f"accuracy {rep.accuracy:.4f}  macro-F1 {rep.macro_f1:.4f}  "
        f"loss {rep.mean_loss:.4f}  ({dataset.num_samples} samples)"
    )
    return EXIT_OK


def _cmd_predict(args) -> int:
    kind, payload = _load_checkpoint(Path(args.model))
    dataset = load_dataset(args.dataset)
    preds, _ = _checkpoint_predictions(kind, payload, dataset)
    names = dataset.label_space.class_names
    lines = ["index,class_index,class_name"]
    lines.extend(f"{i},{int(p)},{names[int(p)]}" for i, p in enumerate(preds))
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text)
        print(f"wrote {len(preds)} predictions to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedvote",
        description="Federated voting-ensemble simulator: generate data, run rounds, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic blob dataset")
    gen.add_argument("--out", required=True, help="dataset directory to create")
    gen.add_argument("--per-class", type=int, default=500, dest="per_class")
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--separation", type=float, default=6.0)
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(func=_cmd_generate)

    part = sub.add_parser("partition", help="deal a dataset into client shards")
    part.add_argument("--dataset", required=True, help="dataset directory to read")
    part.add_argument("--clients", type=int, default=4)
    part.add_argument("--seed", type=int, default=None)
    part.add_argument("--out", required=True, help="directory for client_<i> shards")
    part.set_defaults(func=_cmd_partition)

    run = sub.add_parser("run", help="run the federation and write round logs")
    run.add_argument("--config", default=None, help="JSON run config (flags override it)")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--clients", type=int, default=None)
    run.add_argument("--rounds", type=int, default=None)
    run.add_argument(
        "--strategy",
        choices=["fedavg_ensemble", "mode_of_client_ensembles"],
        default=None,
    )
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument(
        "--parallel-clients",
        dest="parallel_clients",
        action="store_const",
        const=True,
        default=None,
        help="train clients concurrently (results are identical either way)",
    )
    run.set_defaults(func=_cmd_run)

    ev = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    ev.add_argument("--model", required=True, help="model or ensemble checkpoint directory")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", required=True, help="directory for report.json and confusion.csv")
    ev.set_defaults(func=_cmd_evaluate)

    pred = sub.add_parser("predict", help="emit per-sample class predictions")
    pred.add_argument("--model", required=True)
    pred.add_argument("--dataset", required=True)
    pred.add_argument("--out", default=None, help="CSV output file (default: stdout)")
    pred.set_defaults(func=_cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        FormatError,
        ShapeError,
        CompatibilityError,
        ValueError,
        FileNotFoundError,
        NotADirectoryError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
