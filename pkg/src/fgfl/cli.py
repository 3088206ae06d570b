"""Experiment runner and operational entry points.

Subcommands: ``generate`` (synthetic cohorts), ``run`` (any comparative
arm over all seeds, simulation-first), ``serve``/``client`` (distributed
processes over MQTT), ``explain`` (edge Shapley reports), ``compare``
(weight-vector similarity). Configs are JSON, schema-validated with
unknown keys rejected; outputs are plain JSON/CSV written atomically.

Exit codes: 2 broker unreachable, 3 config/schema violation,
4 dataset missing, 5 join rejected. ``FGFL_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import wire
from .dataio import Cohort, DatasetError, atomic_write_json, atomic_write_text, load_dataset
from .datagen import CohortSpec, generate_cohort, hold_out_test, partition_idealized, partition_realistic
from .explain import explain_sample, similarity_matrix
from .federation import (
    ClientRejected,
    FederationClient,
    FederationConfig,
    FederationServer,
    FederationResult,
    result_fingerprint,
    run_centralized,
    run_federation,
    run_isolated,
    validation_split,
)
from .graphs import PatientSample, build_sample
from .model import ModelConfig, ModelParameters, NodeFeatureConfig, init_parameters, unflatten
from .training import TrainConfig, evaluate
from .transport import LoopbackTransport, MessageEndpoint, TlsConfig, TransportError, mqtt_transport

log = logging.getLogger("fgfl.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BROKER_UNREACHABLE = 2
EXIT_SCHEMA_VIOLATION = 3
EXIT_DATASET_MISSING = 4
EXIT_JOIN_REJECTED = 5

ARMS = ("fedavg", "scaffold", "centralized", "isolated")
SETUPS = ("realistic", "idealized")

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment_id", "algorithm"],
    "properties": {
        "experiment_id": {"type": "string", "pattern": "^[a-z0-9-]+$"},
        "algorithm": {"enum": list(ARMS)},
        "setup": {"enum": list(SETUPS)},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "dataset": {"type": "string"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "feature_scheme": {"enum": ["one-hot-region", "one-hot-plus-strength"]},
                "heads": {"type": "integer", "minimum": 1},
                "layers": {"type": "integer", "minimum": 1},
                "head_dim": {"type": "integer", "minimum": 1},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "clip_threshold": {"type": "number", "exclusiveMinimum": 0},
                "local_epochs": {"type": "integer", "minimum": 0},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "optimizer": {"enum": ["adam", "sgd"]},
            },
        },
        "federation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rounds": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "eta_g": {"type": "number", "exclusiveMinimum": 0},
                "local_lr": {"type": "number", "exclusiveMinimum": 0},
                "k_steps": {"type": "integer", "minimum": 0},
                "sample_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "persist_optimizer": {"type": "boolean"},
                "round_timeout": {"type": "number", "exclusiveMinimum": 0},
                "join_timeout": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "test_size": {"type": "integer", "minimum": 1},
                "test_seed": {"type": "integer"},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "idealized_clients": {"type": "integer", "minimum": 2},
                "rewiring": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "k": {"type": "integer", "minimum": 1},
                        "percentile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 100},
                        "coupling": {"enum": ["adjacent-replica", "all-pairs-replica"]},
                    },
                },
            },
        },
        "transport": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["loopback", "mqtt"]},
                "broker": {"type": "string"},
                "max_chunk": {"type": "integer", "minimum": 1024},
                "tls": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "ca": {"type": "string"},
                        "cert": {"type": "string"},
                        "key": {"type": "string"},
                    },
                },
            },
        },
    },
}

DEFAULTS = {
    "setup": "realistic",
    "seeds": [0, 1, 2, 3, 4],
    "model": {"feature_scheme": "one-hot-plus-strength", "heads": 6, "layers": 3, "head_dim": 8},
    "training": {
        "batch_size": 2,
        "lr": 0.003,
        "weight_decay": 0.01,
        "clip_threshold": 10.0,
        "local_epochs": 1,
        "dropout": 0.1,
        "optimizer": "adam",
    },
    "federation": {
        "rounds": 200,
        "patience": 10,
        "eta_g": 1.0,
        "local_lr": 0.003,
        "k_steps": 0,
        "sample_fraction": 1.0,
        "persist_optimizer": False,
        "round_timeout": 600.0,
        "join_timeout": 60.0,
    },
    "data": {
        "test_size": 11,
        "test_seed": 0,
        "val_fraction": 0.1,
        "idealized_clients": 3,
        "rewiring": {"k": 3, "percentile": 99.0, "coupling": "adjacent-replica"},
    },
    "transport": {"mode": "loopback", "max_chunk": wire.DEFAULT_MAX_CHUNK},
}


class ConfigError(ValueError):
    pass


def load_config(path_or_dict) -> dict:
    """Validate, then overlay onto defaults."""
    if isinstance(path_or_dict, (str, Path)):
        raw = json.loads(Path(path_or_dict).read_text())
    else:
        raw = path_or_dict
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config invalid at {list(exc.absolute_path)}: {exc.message}") from exc

    def merge(base, overlay):
        out = dict(base)
        for key, value in overlay.items():
            if isinstance(value, dict) and isinstance(out.get(key), dict):
                out[key] = merge(out[key], value)
            else:
                out[key] = value
        return out

    return merge(DEFAULTS, raw)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# dataset -> samples
# ---------------------------------------------------------------------------

def build_samples(cohort: Cohort, config: dict) -> dict[str, PatientSample]:
    rw = config["data"]["rewiring"]
    samples: dict[str, PatientSample] = {}
    for rec in cohort.patients:
        samples[rec.patient_id] = build_sample(
            cohort.atlas,
            rec.matrices,
            rec.label,
            rec.patient_id,
            rec.hospital_id,
            k=rw["k"],
            percentile=rw["percentile"],
            coupling=rw["coupling"],
        )
    return samples


def model_config_for(cohort: Cohort, config: dict) -> ModelConfig:
    m = config["model"]
    return ModelConfig(
        features=NodeFeatureConfig(
            scheme=m["feature_scheme"],
            n_regions=cohort.atlas.count,
            n_bands=len(cohort.bands),
        ),
        n_layers=m["layers"],
        heads=m["heads"],
        head_dim=m["head_dim"],
    )


def train_config_for(config: dict, seed: int = 0) -> TrainConfig:
    t = config["training"]
    return TrainConfig(
        batch_size=t["batch_size"],
        clip_threshold=t["clip_threshold"],
        local_epochs=t["local_epochs"],
        seed=seed,
        lr=t["lr"],
        weight_decay=t["weight_decay"],
        optimizer=t["optimizer"],
        dropout=t["dropout"],
    )


def federation_config_for(config: dict, seed: int) -> FederationConfig:
    f = config["federation"]
    algorithm = config["algorithm"] if config["algorithm"] in ("fedavg", "scaffold") else "fedavg"
    return FederationConfig(
        experiment_id=config["experiment_id"],
        algorithm=algorithm,
        rounds=f["rounds"],
        patience=f["patience"],
        eta_g=f["eta_g"],
        local_lr=f["local_lr"],
        k_steps=f["k_steps"],
        sample_fraction=f["sample_fraction"],
        seed=seed,
        train=train_config_for(config),
        scaffold_clip=config["training"]["clip_threshold"],
        persist_optimizer=f["persist_optimizer"],
        round_timeout=f["round_timeout"],
        join_timeout=f["join_timeout"],
    )


# ---------------------------------------------------------------------------
# model files (wire-encoded, versioned, checksummed)
# ---------------------------------------------------------------------------

def save_model(path: Path, params: ModelParameters, experiment: str = "saved") -> None:
    msg = wire.FederationMessage(
        kind=wire.KIND_GLOBAL_MODEL,
        experiment=experiment,
        round=0,
        sender="cli",
        body=wire.GlobalModelBody(
            payload=wire.ModelPayload(scheme_id=params.config.scheme_id, params=params.flatten())
        ),
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    from .dataio import atomic_write_bytes

    atomic_write_bytes(Path(path), wire.encode(msg))


def load_model(path: Path, model_config: ModelConfig) -> ModelParameters:
    msg = wire.decode(Path(path).read_bytes())
    payload = msg.body.payload
    if payload.scheme_id != model_config.scheme_id:
        raise ConfigError(
            f"model {path} was trained with scheme {payload.scheme_id!r}, "
            f"dataset/config implies {model_config.scheme_id!r}"
        )
    return unflatten(payload.params.astype(np.float64), model_config)


def load_flat_model(path: Path) -> tuple[str, np.ndarray]:
    msg = wire.decode(Path(path).read_bytes())
    return msg.body.payload.scheme_id, msg.body.payload.params.astype(np.float64)


# ---------------------------------------------------------------------------
# experiment arms
# ---------------------------------------------------------------------------

def _partition(config: dict, train_records, samples) -> dict[str, list[PatientSample]]:
    if config["setup"] == "realistic":
        record_shards = partition_realistic(train_records)
    else:
        record_shards = partition_idealized(train_records, config["data"]["idealized_clients"])
    return {
        cid: [samples[r.patient_id] for r in recs] for cid, recs in sorted(record_shards.items())
    }


def run_experiment(
    config: dict,
    dataset_dir: Path,
    out_dir: Path | None = None,
    transport_mode: str | None = None,
    broker: str | None = None,
    tls: TlsConfig | None = None,
) -> dict:
    """Execute one comparative arm over all configured seeds.

    Returns the RunReport dict; also writes runreport.json, history.csv,
    metrics.jsonl and per-seed model files when ``out_dir`` is given.
    """
    started = time.perf_counter()
    cohort = load_dataset(Path(dataset_dir))
    samples = build_samples(cohort, config)
    model_config = model_config_for(cohort, config)
    data_cfg = config["data"]
    train_records, test_records = hold_out_test(
        cohort.patients, k=data_cfg["test_size"], seed=data_cfg["test_seed"]
    )
    test_samples = [samples[r.patient_id] for r in test_records]
    algorithm = config["algorithm"]
    mode = transport_mode or config["transport"]["mode"]
    per_seed: list[dict] = []
    history_rows: list[tuple[int, str, int, float]] = []  # seed, client, round, val MAE
    metrics_lines: list[dict] = []
    models: dict[str, np.ndarray] = {}

    for seed in config["seeds"]:
        initial = init_parameters(model_config, seed=seed)
        if algorithm == "centralized":
            pool = [samples[r.patient_id] for r in train_records]
            train_set, val_set = validation_split(
                pool, fraction=data_cfg["val_fraction"], seed=data_cfg["test_seed"]
            )
            fed = federation_config_for(config, seed)
            result = run_centralized(train_set, val_set, initial, fed)
            seed_entry = _seed_entry(seed, result, test_samples, model_config)
            models[f"centralized_seed{seed}"] = result.w_star
            for entry in result.rounds:
                history_rows.append((seed, "centralized", entry["round"], entry["val_mae"]))
            metrics_lines.extend(result.metrics_lines)
        elif algorithm == "isolated":
            shards = _partition(config, train_records, samples)
            fed = federation_config_for(config, seed)
            results = run_isolated(shards, initial, fed, val_fraction=data_cfg["val_fraction"])
            client_maes = []
            client_entries = {}
            for cid, result in results.items():
                metrics = evaluate(test_samples, unflatten(result.w_star, model_config))
                client_maes.append(metrics.mae)
                client_entries[cid] = {
                    "test_mae": metrics.mae,
                    "test_mse": metrics.mse,
                    "best_round": result.best_round,
                    "rounds_run": len(result.rounds),
                    "early_stopped": result.early_stopped,
                }
                models[f"isolated_{cid}_seed{seed}"] = result.w_star
                for entry in result.rounds:
                    history_rows.append((seed, cid, entry["round"], entry["val_mae"]))
                metrics_lines.extend(result.metrics_lines)
            seed_entry = {
                "seed": seed,
                "test_mae": float(np.mean(client_maes)),
                "test_mae_std_across_clients": float(np.std(client_maes)),
                "clients": client_entries,
            }
        else:  # fedavg | scaffold over a transport
            pool = [samples[r.patient_id] for r in train_records]
            train_set, val_set = validation_split(
                pool, fraction=data_cfg["val_fraction"], seed=data_cfg["test_seed"]
            )
            train_ids = {s.patient_id for s in train_set}
            shards_all = _partition(config, train_records, samples)
            shards = {
                cid: [s for s in members if s.patient_id in train_ids]
                for cid, members in shards_all.items()
            }
            shards = {cid: members for cid, members in shards.items() if members}
            fed = federation_config_for(config, seed)
            factory = _transport_factory(mode, config, broker, tls)
            result = run_federation(fed, shards, val_set, initial, factory)
            seed_entry = _seed_entry(seed, result, test_samples, model_config)
            seed_entry["fingerprint"] = result_fingerprint(result)
            models[f"{algorithm}_{config['setup']}_seed{seed}"] = result.w_star
            for entry in result.rounds:
                history_rows.append((seed, "server", entry["round"], entry["val_mae"]))
            metrics_lines.extend(result.metrics_lines)
        per_seed.append(seed_entry)

    maes = [e["test_mae"] for e in per_seed]
    report = {
        "experiment_id": config["experiment_id"],
        "algorithm": algorithm,
        "setup": config["setup"],
        "transport": mode,
        "seeds": list(config["seeds"]),
        "per_seed": per_seed,
        "mean_mae": float(np.mean(maes)),
        "std_mae": float(np.std(maes)),
        "config_hash": config_hash(config),
        "wall_seconds": round(time.perf_counter() - started, 3),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_json(out / "runreport.json", report)
        lines = ["seed,client,round,val_mae"]
        lines += [f"{s},{c},{r},{m!r}" for s, c, r, m in history_rows]
        atomic_write_text(out / "history.csv", "\n".join(lines) + "\n")
        atomic_write_text(
            out / "metrics.jsonl",
            "\n".join(json.dumps(line, sort_keys=True) for line in metrics_lines) + "\n",
        )
        for name, flat in models.items():
            save_model(
                out / "models" / f"{name}.fgm",
                unflatten(flat, model_config),
                experiment=config["experiment_id"],
            )
    return report


def _seed_entry(seed, result: FederationResult, test_samples, model_config) -> dict:
    metrics = evaluate(test_samples, unflatten(result.w_star, model_config))
    return {
        "seed": seed,
        "test_mae": metrics.mae,
        "test_mse": metrics.mse,
        "best_round": result.best_round,
        "best_val_mae": result.best_val_mae,
        "rounds_run": len(result.rounds),
        "early_stopped": result.early_stopped,
    }


def _transport_factory(mode: str, config: dict, broker: str | None, tls: TlsConfig | None):
    if mode == "loopback":
        shared = LoopbackTransport()
        return lambda name: shared
    if mode != "mqtt":
        raise ConfigError(f"unknown transport mode {mode!r}")
    address = broker or config["transport"].get("broker")
    if not address:
        raise ConfigError("mqtt transport needs a broker address")
    if tls is None and "tls" in config["transport"]:
        t = config["transport"]["tls"]
        tls = TlsConfig(ca_file=t["ca"], cert_file=t.get("cert"), key_file=t.get("key"))
    exp = config["experiment_id"]

    def factory(name: str):
        return mqtt_transport(address, client_id=f"{exp}-{name}", tls=tls)

    return factory


# ---------------------------------------------------------------------------
# distributed processes
# ---------------------------------------------------------------------------

def serve(config: dict, dataset_dir: Path, out_dir: Path, broker: str, tls: TlsConfig | None, seed: int) -> dict:
    cohort = load_dataset(Path(dataset_dir))
    samples = build_samples(cohort, config)
    model_config = model_config_for(cohort, config)
    data_cfg = config["data"]
    train_records, test_records = hold_out_test(
        cohort.patients, k=data_cfg["test_size"], seed=data_cfg["test_seed"]
    )
    pool = [samples[r.patient_id] for r in train_records]
    _, val_set = validation_split(pool, fraction=data_cfg["val_fraction"], seed=data_cfg["test_seed"])
    shards = _partition(config, train_records, samples)
    fed = federation_config_for(config, seed)
    transport = mqtt_transport(broker, client_id=f"{config['experiment_id']}-server", tls=tls)
    server = FederationServer(
        config=fed,
        registry=list(shards),
        validation=val_set,
        initial=init_parameters(model_config, seed=seed),
        endpoint=MessageEndpoint(transport, max_chunk=config["transport"]["max_chunk"]),
    )
    result = server.run()
    transport.close()
    test_samples = [samples[r.patient_id] for r in test_records]
    entry = _seed_entry(seed, result, test_samples, model_config)
    entry["fingerprint"] = result_fingerprint(result)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / f"serve_seed{seed}.json", {"rounds": result.rounds, **entry})
    save_model(out / "models" / f"served_seed{seed}.fgm", unflatten(result.w_star, model_config))
    return entry


def client(config: dict, dataset_dir: Path, client_id: str, broker: str, tls: TlsConfig | None, seed: int) -> None:
    cohort = load_dataset(Path(dataset_dir))
    samples = build_samples(cohort, config)
    model_config = model_config_for(cohort, config)
    data_cfg = config["data"]
    train_records, _ = hold_out_test(cohort.patients, k=data_cfg["test_size"], seed=data_cfg["test_seed"])
    pool = [samples[r.patient_id] for r in train_records]
    _, val_set = validation_split(pool, fraction=data_cfg["val_fraction"], seed=data_cfg["test_seed"])
    val_ids = {s.patient_id for s in val_set}
    shards = _partition(config, train_records, samples)
    if client_id not in shards:
        raise ConfigError(f"client id {client_id!r} not in partition {sorted(shards)}")
    shard = [s for s in shards[client_id] if s.patient_id not in val_ids]
    fed = federation_config_for(config, seed)
    transport = mqtt_transport(broker, client_id=f"{config['experiment_id']}-{client_id}", tls=tls)
    worker = FederationClient(
        client_id=client_id,
        samples=shard,
        config=fed,
        model_config=model_config,
        endpoint=MessageEndpoint(transport, max_chunk=config["transport"]["max_chunk"]),
    )
    try:
        worker.run()
    finally:
        transport.close()


# ---------------------------------------------------------------------------
# argparse plumbing
# ---------------------------------------------------------------------------

def _tls_from_args(args) -> TlsConfig | None:
    if args.tls_ca:
        return TlsConfig(ca_file=args.tls_ca, cert_file=args.tls_cert, key_file=args.tls_key)
    return None


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("FGFL_LOG", "WARNING").upper())
    parser = argparse.ArgumentParser(prog="fgfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate a synthetic cohort dataset")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--patients", type=int, default=72)
    p_gen.add_argument("--heterogeneity", type=float, default=0.0)
    p_gen.add_argument("--shards", default="0.35,0.30,0.20,0.15",
                       help="comma-separated hospital proportions, must sum to 1")
    p_gen.add_argument("--bands", default="alpha1,alpha2,beta1")
    p_gen.add_argument("--regions", type=int, default=31)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True)
    common.add_argument("--dataset", help="dataset directory (overrides config)")
    common.add_argument("--broker", help="MQTT broker host:port")
    common.add_argument("--tls-ca")
    common.add_argument("--tls-cert")
    common.add_argument("--tls-key")

    p_run = sub.add_parser("run", parents=[common], help="run one comparative arm over all seeds")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--transport", choices=["loopback", "mqtt"])
    p_run.add_argument("--seeds", type=int, help="override: use seeds 0..N-1")

    p_serve = sub.add_parser("serve", parents=[common], help="parameter-server process (MQTT)")
    p_serve.add_argument("--out", required=True)
    p_serve.add_argument("--seed", type=int, default=0)

    p_client = sub.add_parser("client", parents=[common], help="training client process (MQTT)")
    p_client.add_argument("--client-id", required=True)
    p_client.add_argument("--seed", type=int, default=0)

    p_exp = sub.add_parser("explain", help="edge Shapley report for one patient")
    p_exp.add_argument("--model", required=True)
    p_exp.add_argument("--config", required=True)
    p_exp.add_argument("--dataset", required=True)
    p_exp.add_argument("--sample-id", required=True)
    p_exp.add_argument("--m", type=int, default=100)
    p_exp.add_argument("--seed", type=int, default=0)
    p_exp.add_argument("--out", required=True)

    p_cmp = sub.add_parser("compare", help="similarity matrix over saved models")
    p_cmp.add_argument("--models", nargs="+", required=True)
    p_cmp.add_argument("--labels", nargs="+")
    p_cmp.add_argument("--groups", nargs="+", help="one group tag per model")
    p_cmp.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA_VIOLATION
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATASET_MISSING
    except ClientRejected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_JOIN_REJECTED
    except TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BROKER_UNREACHABLE


def _dispatch(args) -> int:
    if args.command == "generate":
        proportions = tuple(float(x) for x in args.shards.split(","))
        try:
            spec = CohortSpec(
                n_patients=args.patients,
                proportions=proportions,
                seed=args.seed,
                heterogeneity=args.heterogeneity,
                bands=tuple(args.bands.split(",")),
                n_regions=args.regions,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cohort = generate_cohort(spec, Path(args.out))
        print(f"generated {len(cohort.patients)} patients in {args.out}")
        return EXIT_OK

    if args.command == "run":
        config = load_config(args.config)
        dataset = args.dataset or config.get("dataset")
        if not dataset:
            raise ConfigError("no dataset given (use --dataset or the config's dataset key)")
        if args.seeds:
            config["seeds"] = list(range(args.seeds))
        report = run_experiment(
            config,
            Path(dataset),
            out_dir=Path(args.out),
            transport_mode=args.transport,
            broker=args.broker,
            tls=_tls_from_args(args),
        )
        print(
            f"{report['algorithm']}/{report['setup']}: "
            f"MAE {report['mean_mae']:.4f} +- {report['std_mae']:.4f} over {len(report['seeds'])} seeds"
        )
        return EXIT_OK

    if args.command == "serve":
        config = load_config(args.config)
        dataset = args.dataset or config.get("dataset")
        if not dataset or not args.broker:
            raise ConfigError("serve needs --dataset and --broker")
        entry = serve(config, Path(dataset), Path(args.out), args.broker, _tls_from_args(args), args.seed)
        print(f"seed {args.seed}: test MAE {entry['test_mae']:.4f}, fingerprint {entry['fingerprint'][:16]}")
        return EXIT_OK

    if args.command == "client":
        config = load_config(args.config)
        dataset = args.dataset or config.get("dataset")
        if not dataset or not args.broker:
            raise ConfigError("client needs --dataset and --broker")
        client(config, Path(dataset), args.client_id, args.broker, _tls_from_args(args), args.seed)
        return EXIT_OK

    if args.command == "explain":
        config = load_config(args.config)
        cohort = load_dataset(Path(args.dataset))
        samples = build_samples(cohort, config)
        if args.sample_id not in samples:
            raise ConfigError(f"sample {args.sample_id!r} not in dataset")
        model_config = model_config_for(cohort, config)
        params = load_model(Path(args.model), model_config)
        report = explain_sample(params, samples[args.sample_id], m_samples=args.m, seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / f"shapley_{args.sample_id}.json", out / f"shapley_{args.sample_id}.csv")
        print(
            f"{report.method} attribution over {len(report.edges)} edges; "
            f"efficiency residual {report.efficiency_residual:.3e}"
        )
        return EXIT_OK

    if args.command == "compare":
        labels = args.labels or [Path(p).stem for p in args.models]
        if len(labels) != len(args.models):
            raise ConfigError("--labels must match --models in length")
        groups = {}
        if args.groups:
            if len(args.groups) != len(args.models):
                raise ConfigError("--groups must match --models in length")
            groups = dict(zip(labels, args.groups))
        vectors = {}
        for label, path in zip(labels, args.models):
            scheme, flat = load_flat_model(Path(path))
            vectors[label] = flat
        matrix = similarity_matrix(vectors, groups)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        matrix.write(out / "similarity.json", out / "similarity.csv")
        print(f"overall mean similarity {matrix.overall_mean:.4f}")
        return EXIT_OK

    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    raise SystemExit(main())
