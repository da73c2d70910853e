"""JSON run configuration: defaults, deep-merge of user overrides, and the
typed views the pipeline modules consume.

A user config only needs the keys it changes; everything else falls back
to the desk-scale defaults below. ``config_hash`` digests the effective
(merged) configuration and is embedded in every output file so results
stay traceable to the exact settings that produced them.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from typing import Any, Mapping

from .errors import ConfigurationError
from .fingerprint import (
    DESK_DEVICE_COUNTS,
    DESK_GROUPS_PER_DEVICE,
    DEFAULT_GROUP_SIZE,
    DEFAULT_PROFILES,
    DeviceModel,
    MODELS,
    ModelProfile,
    ReaderConfig,
)
from .flcore import (
    CentralizedConfig,
    ScenarioConfig,
    TrainingParams,
)
from .mlp import MlpArchitecture

DEFAULT_CONFIG: dict[str, Any] = {
    "corpus": {
        "group_size": DEFAULT_GROUP_SIZE,
        "groups_per_device": DESK_GROUPS_PER_DEVICE,
        "device_counts": {m.value: DESK_DEVICE_COUNTS[m] for m in MODELS},
        "profiles": {
            m.value: {
                "base_time": DEFAULT_PROFILES[m].base_time,
                "dispersion": DEFAULT_PROFILES[m].dispersion,
                "spike_probability": DEFAULT_PROFILES[m].spike_probability,
                "spike_scale": DEFAULT_PROFILES[m].spike_scale,
            }
            for m in MODELS
        },
        "seed": 7,
    },
    "model": {
        "layer_sizes": [13, 100, 100, 4],
        "learning_rate": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
    },
    "scenario": {
        "org_count": 5,
        "distribution": {
            "0": {"RPI1": 1, "RPI3": 1},
            "1": {"RPI1": 6, "RPI3": 6},
            "2": {"RPI2": 1, "RPI4": 2},
            "3": {"RPI1": 1, "RPI3": 1},
            "4": {"RPI1": 1, "RPI2": 2, "RPI3": 1, "RPI4": 2},
        },
        "rounds": 30,
        "local_epochs": 1,
        "client_fraction": 1.0,
        "batch_size": 4,
        "seed": 11,
        "train_fraction": 0.8,
        "validation_fraction": 0.1,
    },
    "centralized": {
        "max_epochs": 100,
        "patience": 20,
        "batch_size": 32,
        "seed": 11,
        "train_fraction": 0.8,
        "validation_fraction": 0.1,
    },
    "aggregation": {
        "kind": "fed_avg",
        "krum_f": 2,
        "zeno_rho": 5e-4,
        "zeno_b": 2,
        "zeno_gamma": 0.001,
        "server_shard_size": 256,
        "server_shard_seed": 97,
    },
    "attack": {
        "malicious_org_ids": [],
        "poison_fraction": 0.0,
        "seed": 23,
    },
    "matrix": {
        "aggregators": ["fed_avg", "coord_median", "krum", "zeno"],
        "malicious_counts": [1, 2, 3],
        "poison_fractions": [0.25, 0.5, 0.75, 1.0],
        "malicious_order": [1, 2, 4],
        "replicate_seeds": [11],
    },
    "reader": {
        "columns": None,
        "label_values": None,
    },
}


# Mappings whose keys are data (org ids), not setting names: a user value
# replaces the default outright instead of merging into it.
_REPLACE_PATHS = {("scenario", "distribution")}


def _deep_merge(base: dict, override: Mapping, path: tuple[str, ...] = ()) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        child_path = path + (key,)
        if (
            key in merged
            and isinstance(merged[key], dict)
            and isinstance(value, Mapping)
            and child_path not in _REPLACE_PATHS
        ):
            merged[key] = _deep_merge(merged[key], value, child_path)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _check_keys(section: str, given: Mapping, allowed: Mapping) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) in {section!r}: {sorted(unknown)}"
        )


def load_config(path: str | os.PathLike | None = None) -> dict[str, Any]:
    """Defaults merged with the JSON file at ``path`` (if given)."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            user = json.load(handle)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigurationError("config root must be a JSON object")
    _check_keys("config", user, DEFAULT_CONFIG)
    for section, value in user.items():
        if not isinstance(value, Mapping):
            raise ConfigurationError(f"config section {section!r} must be an object")
        if section != "corpus":  # corpus subsections checked in corpus_settings
            _check_keys(section, value, DEFAULT_CONFIG[section])
    return _deep_merge(DEFAULT_CONFIG, user)


def config_hash(config: Mapping[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def corpus_settings(config: Mapping[str, Any]) -> dict[str, Any]:
    """Typed generator settings: profiles, device counts, sizes, seed."""
    section = config["corpus"]
    _check_keys("corpus", section, DEFAULT_CONFIG["corpus"])
    profiles: dict[DeviceModel, ModelProfile] = {}
    for name, raw in section["profiles"].items():
        model = DeviceModel.parse(name)
        _check_keys(f"corpus.profiles.{name}", raw, DEFAULT_CONFIG["corpus"]["profiles"][model.value])
        profile = ModelProfile(
            model=model,
            base_time=float(raw["base_time"]),
            dispersion=float(raw["dispersion"]),
            spike_probability=float(raw["spike_probability"]),
            spike_scale=float(raw["spike_scale"]),
        )
        profile.validate()
        profiles[model] = profile
    device_counts = {
        DeviceModel.parse(name): int(count)
        for name, count in section["device_counts"].items()
    }
    if int(section["groups_per_device"]) < 1:
        raise ConfigurationError("corpus.groups_per_device must be >= 1")
    if int(section["group_size"]) < 2:
        raise ConfigurationError("corpus.group_size must be >= 2")
    return {
        "profiles": profiles,
        "device_counts": device_counts,
        "groups_per_device": int(section["groups_per_device"]),
        "group_size": int(section["group_size"]),
        "seed": int(section["seed"]),
    }


def training_params(config: Mapping[str, Any]) -> TrainingParams:
    model = config["model"]
    return TrainingParams(
        architecture=MlpArchitecture(tuple(int(s) for s in model["layer_sizes"])),
        learning_rate=float(model["learning_rate"]),
        beta1=float(model["beta1"]),
        beta2=float(model["beta2"]),
        epsilon=float(model["epsilon"]),
    )


def scenario_config(config: Mapping[str, Any]) -> ScenarioConfig:
    section = config["scenario"]
    distribution: dict[int, tuple[DeviceModel, ...] | dict[DeviceModel, int]] = {}
    for org_key, models in section["distribution"].items():
        try:
            org_id = int(org_key)
        except ValueError:
            raise ConfigurationError(
                f"distribution org id {org_key!r} is not an integer"
            ) from None
        if isinstance(models, Mapping):
            distribution[org_id] = {
                DeviceModel.parse(m): int(count) for m, count in models.items()
            }
        else:
            distribution[org_id] = tuple(DeviceModel.parse(m) for m in models)
    scenario = ScenarioConfig(
        org_count=int(section["org_count"]),
        distribution=distribution,
        rounds=int(section["rounds"]),
        local_epochs=int(section["local_epochs"]),
        client_fraction=float(section["client_fraction"]),
        batch_size=int(section["batch_size"]),
        seed=int(section["seed"]),
        train_fraction=float(section["train_fraction"]),
        validation_fraction=float(section["validation_fraction"]),
        params=training_params(config),
    )
    scenario.validate()
    return scenario


def centralized_config(config: Mapping[str, Any]) -> CentralizedConfig:
    section = config["centralized"]
    centralized = CentralizedConfig(
        max_epochs=int(section["max_epochs"]),
        patience=int(section["patience"]),
        batch_size=int(section["batch_size"]),
        seed=int(section["seed"]),
        train_fraction=float(section["train_fraction"]),
        validation_fraction=float(section["validation_fraction"]),
        params=training_params(config),
    )
    centralized.validate()
    return centralized


def reader_config(config: Mapping[str, Any]) -> ReaderConfig:
    section = config["reader"]
    return ReaderConfig(
        columns=section.get("columns") or None,
        label_values=section.get("label_values") or None,
    )
