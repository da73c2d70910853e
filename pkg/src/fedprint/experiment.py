"""Run orchestration: wiring datasets, configs, and pipelines into output
artifacts (metrics JSON, curves/confusion CSV, checkpoints, matrix reports).

Every artifact embeds the config hash; metrics files contain no clocks or
environment data, so two equal-seed runs produce byte-identical output.
"""
from __future__ import annotations

import concurrent.futures
import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import config as config_mod
from .adversary import AttackConfig, apply_attack, poisoned_row_count
from .aggregation import Aggregator, AggregatorSpec, make_aggregator
from .errors import ConfigurationError, InvalidInputError
from .fingerprint import (
    FeatureVector,
    MODELS,
    build_corpus,
    extract_features,
    generate_timing_group,
    read_dataset,
    rows_to_arrays,
    write_dataset,
)
from .flcore import (
    FeatureBounds,
    Organization,
    RoundMetrics,
    ScenarioConfig,
    global_test_set,
    normalization_handshake,
    normalize_organizations,
    partition_scenario,
    run_centralized,
    run_federated,
    scale_features,
)
from .mlp import ModelWeights, evaluate, load_checkpoint, save_checkpoint

METRICS_SCHEMA_VERSION = 1


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json(path: Path, payload: Mapping[str, Any]) -> None:
    _write_atomic(path, json.dumps(payload, indent=2) + "\n")


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def generate_corpus(config: Mapping[str, Any]) -> list[FeatureVector]:
    settings = config_mod.corpus_settings(config)
    return build_corpus(
        profiles=settings["profiles"],
        device_counts=settings["device_counts"],
        groups_per_device=settings["groups_per_device"],
        seed=settings["seed"],
        group_size=settings["group_size"],
    )


def cmd_generate(config: Mapping[str, Any], out_path: str | os.PathLike) -> dict[str, int]:
    """Build the synthetic corpus and write it as CSV; returns per-model counts."""
    rows = generate_corpus(config)
    write_dataset(rows, out_path)
    counts: dict[str, int] = {m.value: 0 for m in MODELS}
    for row in rows:
        counts[row.model.value] += 1
    return counts


def load_rows(path: str | os.PathLike, config: Mapping[str, Any]) -> list[FeatureVector]:
    return read_dataset(path, config_mod.reader_config(config))


def server_validation_shard(
    config: Mapping[str, Any],
    bounds: FeatureBounds,
    fallback: Sequence[Organization] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Clean feature/label shard the server keeps for Zeno scoring.

    Drawn from the synthetic generator (never part of any client's data)
    and scaled with the agreed bounds. When training on an external dataset
    with no generator profiles, the tail of the server-side test pool is
    used instead.
    """
    section = config["aggregation"]
    size = int(section["server_shard_size"])
    if size < 1:
        raise ConfigurationError("aggregation.server_shard_size must be >= 1")
    try:
        settings = config_mod.corpus_settings(config)
    except (ConfigurationError, KeyError):
        settings = None
    if settings is not None:
        seeds = np.random.SeedSequence(
            int(section["server_shard_seed"])
        ).generate_state(size, dtype=np.uint64)
        # class mix follows the corpus proportions, like any fresh collection
        counts = settings["device_counts"]
        total_devices = sum(counts[m] for m in MODELS)
        quota = [round(size * counts[m] / total_devices) for m in MODELS]
        while sum(quota) > size:
            quota[int(np.argmax(quota))] -= 1
        while sum(quota) < size:
            quota[int(np.argmin(quota))] += 1
        rows = []
        for model, model_quota in zip(MODELS, quota):
            for _ in range(model_quota):
                group = generate_timing_group(
                    settings["profiles"][model],
                    device_id=-1,
                    rng_seed=int(seeds[len(rows)]),
                    group_size=settings["group_size"],
                )
                rows.append(extract_features(group))
        features, labels, _ = rows_to_arrays(rows)
        return scale_features(features, bounds), labels
    if fallback is None:
        raise ConfigurationError(
            "zeno needs generator profiles or organizations to draw a shard from"
        )
    test = global_test_set(fallback)
    if len(test) < 1:
        raise ConfigurationError("no rows available for the zeno server shard")
    take = min(size, len(test))
    return test.features[-take:], test.labels[-take:]


def aggregator_from_config(
    config: Mapping[str, Any],
    bounds: FeatureBounds,
    orgs: Sequence[Organization],
    kind: str | None = None,
) -> Aggregator:
    section = config["aggregation"]
    kind = kind or section["kind"]
    server_validation = None
    if kind == "zeno":
        server_validation = server_validation_shard(config, bounds, fallback=orgs)
    spec = AggregatorSpec(
        kind=kind,
        krum_f=int(section["krum_f"]),
        zeno_rho=float(section["zeno_rho"]),
        zeno_b=int(section["zeno_b"]),
        zeno_gamma=float(section["zeno_gamma"]),
        server_validation=server_validation,
    )
    return make_aggregator(spec)


@dataclass
class PreparedScenario:
    """Partitioned, normalized organizations plus the shared bounds.

    ``clean_orgs`` are pristine (attack applied per run on top of these).
    """

    clean_orgs: list[Organization]
    bounds: FeatureBounds
    scenario: ScenarioConfig


def prepare_scenario(
    rows: Sequence[FeatureVector], config: Mapping[str, Any]
) -> PreparedScenario:
    scenario = config_mod.scenario_config(config)
    orgs = partition_scenario(rows, scenario, scenario.seed)
    bounds = normalization_handshake(orgs)
    normalized = normalize_organizations(orgs, bounds)
    return PreparedScenario(clean_orgs=normalized, bounds=bounds, scenario=scenario)


@dataclass
class FederatedRun:
    weights: ModelWeights
    rounds: list[RoundMetrics]
    test_accuracy: float
    confusion: np.ndarray
    bounds: FeatureBounds
    poisoned_rows: dict[int, int]


def run_federated_once(
    prepared: PreparedScenario,
    config: Mapping[str, Any],
    attack: AttackConfig,
    aggregator_kind: str | None = None,
    seed: int | None = None,
    progress: Callable[[str], None] | None = None,
) -> FederatedRun:
    """One full federated training run on a prepared scenario."""
    scenario = prepared.scenario
    if seed is not None:
        scenario = ScenarioConfig(
            org_count=scenario.org_count,
            distribution=scenario.distribution,
            rounds=scenario.rounds,
            local_epochs=scenario.local_epochs,
            client_fraction=scenario.client_fraction,
            batch_size=scenario.batch_size,
            seed=seed,
            train_fraction=scenario.train_fraction,
            validation_fraction=scenario.validation_fraction,
            params=scenario.params,
        )
    orgs = apply_attack(prepared.clean_orgs, attack)
    poisoned = {
        org_id: poisoned_row_count(prepared.clean_orgs[org_id], attack.poison_fraction)
        for org_id in attack.malicious_org_ids
    }
    aggregator = aggregator_from_config(
        config, prepared.bounds, prepared.clean_orgs, kind=aggregator_kind
    )
    aggregator.spec.validate(num_clients=len(orgs))
    weights, rounds = run_federated(orgs, scenario, aggregator, progress=progress)
    test = global_test_set(orgs)
    accuracy, confusion = evaluate(weights, test.features, test.labels)
    return FederatedRun(
        weights=weights,
        rounds=rounds,
        test_accuracy=accuracy,
        confusion=confusion,
        bounds=prepared.bounds,
        poisoned_rows=poisoned,
    )


def _bounds_payload(bounds: FeatureBounds) -> dict:
    return {
        "feature_min": bounds.minimum.tolist(),
        "feature_max": bounds.maximum.tolist(),
    }


def train_federated(
    rows: Sequence[FeatureVector],
    config: Mapping[str, Any],
    out_dir: str | os.PathLike,
    progress: Callable[[str], None] | None = None,
) -> dict[str, Any]:
    """`train --mode federated`: run, then write metrics/curves/confusion/checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    attack_section = config["attack"]
    attack = AttackConfig(
        malicious_org_ids=tuple(int(i) for i in attack_section["malicious_org_ids"]),
        poison_fraction=float(attack_section["poison_fraction"]),
        seed=int(attack_section["seed"]),
    )
    prepared = prepare_scenario(rows, config)
    run = run_federated_once(prepared, config, attack, progress=progress)

    digest = config_mod.config_hash(dict(config))
    metrics = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "mode": "federated",
        "config_hash": digest,
        "config": config,
        "aggregator": config["aggregation"]["kind"],
        "poisoned_rows_per_org": {str(k): v for k, v in run.poisoned_rows.items()},
        "rounds": [r.to_dict() for r in run.rounds],
        "final": {
            "test_accuracy": run.test_accuracy,
            "confusion": run.confusion.tolist(),
        },
    }
    write_json(out / "metrics.json", metrics)
    write_csv(
        out / "curves.csv",
        ("round", "org", "validation_accuracy", "config_hash"),
        [
            (r.round_index, org_id, acc, digest)
            for r in run.rounds
            for org_id, acc in sorted(r.org_validation_accuracy.items())
        ],
    )
    write_confusion_csv(out / "confusion.csv", run.confusion)
    save_checkpoint(
        out / "checkpoint.json",
        run.weights,
        preprocessing={**_bounds_payload(run.bounds), "config_hash": digest},
    )
    return metrics


def train_centralized(
    rows: Sequence[FeatureVector],
    config: Mapping[str, Any],
    out_dir: str | os.PathLike,
    progress: Callable[[str], None] | None = None,
) -> dict[str, Any]:
    """`train --mode centralized`: baseline run plus the same artifact set."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    centralized = config_mod.centralized_config(config)
    weights, result = run_centralized(rows, centralized, progress=progress)

    digest = config_mod.config_hash(dict(config))
    metrics = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "mode": "centralized",
        "config_hash": digest,
        "config": config,
        "epochs": [
            {"epoch": i, "train_loss": loss, "validation_accuracy": acc}
            for i, (loss, acc) in enumerate(
                zip(result.epoch_train_loss, result.epoch_validation_accuracy)
            )
        ],
        "best_epoch": result.best_epoch,
        "final": {
            "test_accuracy": result.test_accuracy,
            "confusion": result.confusion.tolist(),
        },
    }
    write_json(out / "metrics.json", metrics)
    write_csv(
        out / "curves.csv",
        ("epoch", "train_loss", "validation_accuracy", "config_hash"),
        [
            (i, loss, acc, digest)
            for i, (loss, acc) in enumerate(
                zip(result.epoch_train_loss, result.epoch_validation_accuracy)
            )
        ],
    )
    write_confusion_csv(out / "confusion.csv", result.confusion)
    save_checkpoint(
        out / "checkpoint.json",
        weights,
        preprocessing={**_bounds_payload(result.bounds), "config_hash": digest},
    )
    return metrics


def write_confusion_csv(path: Path, confusion: np.ndarray) -> None:
    header = ["true\\predicted"] + [m.value for m in MODELS]
    rows = [
        [MODELS[i].value] + confusion[i].tolist() for i in range(confusion.shape[0])
    ]
    write_csv(path, header, rows)


def evaluate_checkpoint(
    checkpoint_path: str | os.PathLike,
    rows: Sequence[FeatureVector],
) -> tuple[float, np.ndarray]:
    """Checkpoint + dataset -> accuracy and confusion matrix.

    The checkpoint's stored normalization bounds are applied to the raw
    features before the forward pass.
    """
    weights, preprocessing = load_checkpoint(checkpoint_path)
    if "feature_min" not in preprocessing or "feature_max" not in preprocessing:
        raise InvalidInputError(
            "checkpoint lacks normalization bounds; cannot evaluate raw features"
        )
    bounds = FeatureBounds(
        minimum=np.asarray(preprocessing["feature_min"], dtype=np.float64),
        maximum=np.asarray(preprocessing["feature_max"], dtype=np.float64),
    )
    features, labels, _ = rows_to_arrays(rows)
    return evaluate(weights, scale_features(features, bounds), labels)


# ---------------------------------------------------------------------------
# Attack matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatrixCell:
    aggregator: str
    n_malicious: int
    poison_fraction: float
    seed: int

    @property
    def cell_id(self) -> str:
        return (
            f"{self.aggregator}_m{self.n_malicious}"
            f"_p{int(round(self.poison_fraction * 100))}_s{self.seed}"
        )


def matrix_cells(config: Mapping[str, Any]) -> list[MatrixCell]:
    """Cartesian run set: per aggregator, one clean baseline plus every
    (malicious count x poison fraction) attack cell, per replication seed."""
    section = config["matrix"]
    cells = []
    for aggregator in section["aggregators"]:
        for seed in section["replicate_seeds"]:
            cells.append(MatrixCell(aggregator, 0, 0.0, int(seed)))
            for count in section["malicious_counts"]:
                for fraction in section["poison_fractions"]:
                    cells.append(
                        MatrixCell(aggregator, int(count), float(fraction), int(seed))
                    )
    return cells


def _attack_for_cell(config: Mapping[str, Any], cell: MatrixCell) -> AttackConfig:
    order = [int(i) for i in config["matrix"]["malicious_order"]]
    if cell.n_malicious > len(order):
        raise ConfigurationError(
            f"matrix.malicious_order lists {len(order)} orgs, "
            f"cell needs {cell.n_malicious}"
        )
    return AttackConfig(
        malicious_org_ids=tuple(order[: cell.n_malicious]),
        poison_fraction=cell.poison_fraction,
        seed=int(config["attack"]["seed"]),
    )


def run_matrix_cell(
    prepared: PreparedScenario, config: Mapping[str, Any], cell: MatrixCell
) -> dict[str, Any]:
    attack = _attack_for_cell(config, cell)
    run = run_federated_once(
        prepared, config, attack, aggregator_kind=cell.aggregator, seed=cell.seed
    )
    record: dict[str, Any] = {
        "cell_id": cell.cell_id,
        "aggregator": cell.aggregator,
        "n_malicious": cell.n_malicious,
        "poison_fraction": cell.poison_fraction,
        "seed": cell.seed,
        "malicious_org_ids": list(attack.malicious_org_ids) if cell.n_malicious else [],
        "poisoned_rows_per_org": {str(k): v for k, v in run.poisoned_rows.items()},
        "test_accuracy": run.test_accuracy,
        "confusion": run.confusion.tolist(),
        "rounds": [r.to_dict() for r in run.rounds],
    }
    return record


def _cell_worker(args: tuple) -> tuple[str, dict[str, Any] | None, str | None]:
    prepared, config, cell = args
    try:
        return cell.cell_id, run_matrix_cell(prepared, config, cell), None
    except Exception as exc:  # a failed cell must not abort the matrix
        return cell.cell_id, None, f"{type(exc).__name__}: {exc}"


def run_attack_matrix(
    rows: Sequence[FeatureVector],
    config: Mapping[str, Any],
    out_dir: str | os.PathLike,
    parallel: int = 0,
    replicates: int | None = None,
    progress: Callable[[str], None] | None = None,
) -> dict[str, Any]:
    """Execute every matrix cell and write the consolidated report.

    Cells are independent; ``parallel`` > 1 runs them in worker processes.
    ``replicates`` overrides ``matrix.replicate_seeds`` with that many
    consecutive seeds; with more than one seed the report also carries
    mean/std per cell. A failed cell is recorded with its error and the
    matrix continues.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if replicates is not None:
        if replicates < 1:
            raise ConfigurationError("replicates must be >= 1")
        base_seed = int(config["scenario"]["seed"])
        config = dict(config)
        config["matrix"] = {
            **config["matrix"],
            "replicate_seeds": [base_seed + i for i in range(replicates)],
        }
    prepared = prepare_scenario(rows, config)
    cells = matrix_cells(config)

    results: dict[str, dict[str, Any] | None] = {}
    errors: dict[str, str | None] = {}
    if parallel and parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as pool:
            for cell_id, record, error in pool.map(
                _cell_worker, [(prepared, config, cell) for cell in cells]
            ):
                results[cell_id] = record
                errors[cell_id] = error
                if progress is not None:
                    progress(f"{cell_id}: {'ok' if error is None else error}")
    else:
        for cell in cells:
            cell_id, record, error = _cell_worker((prepared, config, cell))
            results[cell_id] = record
            errors[cell_id] = error
            if progress is not None:
                progress(f"{cell_id}: {'ok' if error is None else error}")

    records = []
    for cell in cells:
        record = results[cell.cell_id]
        if record is None:
            records.append({"cell_id": cell.cell_id, "aggregator": cell.aggregator,
                            "n_malicious": cell.n_malicious,
                            "poison_fraction": cell.poison_fraction,
                            "seed": cell.seed, "error": errors[cell.cell_id]})
        else:
            records.append(record)

    digest = config_mod.config_hash(dict(config))
    report = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "mode": "attack-matrix",
        "config_hash": digest,
        "config": config,
        "cells": records,
    }
    seeds = config["matrix"]["replicate_seeds"]
    if len(seeds) > 1:
        report["summary"] = _replication_summary(records)
    write_json(out / "matrix.json", report)
    write_csv(
        out / "matrix.csv",
        (
            "aggregator",
            "n_malicious",
            "poison_fraction",
            "seed",
            "test_accuracy",
            "config_hash",
        ),
        [
            (
                r["aggregator"],
                r["n_malicious"],
                r["poison_fraction"],
                r["seed"],
                r.get("test_accuracy", ""),
                digest,
            )
            for r in records
        ],
    )
    return report


def _replication_summary(records: Sequence[Mapping[str, Any]]) -> list[dict]:
    """Per-cell mean/std of test accuracy across replication seeds."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        if "error" in r:
            continue
        key = (r["aggregator"], r["n_malicious"], r["poison_fraction"])
        groups.setdefault(key, []).append(r["test_accuracy"])
    return [
        {
            "aggregator": aggregator,
            "n_malicious": n_malicious,
            "poison_fraction": fraction,
            "mean_accuracy": float(np.mean(accs)),
            "std_accuracy": float(np.std(accs)),
            "seeds": len(accs),
        }
        for (aggregator, n_malicious, fraction), accs in sorted(groups.items())
    ]
