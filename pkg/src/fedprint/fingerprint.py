"""Execution-time fingerprints: synthetic sample generation, the 13
statistical features, and the dataset CSV schema.

A fingerprint summarizes one group of repeated executions of the same
function on one device. Devices of different models have different CPUs,
so the timing statistics separate cleanly by model; the synthetic
generator reproduces that separation with a right-skewed (log-normal)
body per model plus occasional scheduler-noise spikes.
"""
from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DatasetFormatError, InvalidInputError


class DeviceModel(str, Enum):
    """The four device models a fingerprint can belong to."""

    RPI1 = "RPI1"
    RPI2 = "RPI2"
    RPI3 = "RPI3"
    RPI4 = "RPI4"

    @classmethod
    def parse(cls, text: str) -> "DeviceModel":
        """Parse a label string, tolerating case and marketing suffixes
        (``"RPi 4 Model B"`` maps to ``RPI4``)."""
        normalized = re.sub(r"[^A-Z0-9]", "", text.upper())
        match = re.search(r"RPI([1-4])", normalized)
        if match is None:
            raise ValueError(f"unknown device model label: {text!r}")
        return cls(f"RPI{match.group(1)}")


MODELS: tuple[DeviceModel, ...] = tuple(DeviceModel)
NUM_CLASSES = len(MODELS)

FEATURE_NAMES: tuple[str, ...] = (
    "min",
    "max",
    "mean",
    "median",
    "std_dev",
    "mode",
    "sum",
    "min_decrease",
    "max_decrease",
    "decrease_sum",
    "min_increase",
    "max_increase",
    "increase_sum",
)
NUM_FEATURES = len(FEATURE_NAMES)

CSV_HEADER: tuple[str, ...] = FEATURE_NAMES + ("model", "device_id")

DEFAULT_GROUP_SIZE = 1000


def model_index(model: DeviceModel) -> int:
    """Class index of a model (RPI1=0 .. RPI4=3)."""
    return MODELS.index(model)


def model_from_index(index: int) -> DeviceModel:
    return MODELS[index]


@dataclass(frozen=True)
class ModelProfile:
    """Synthetic timing profile standing in for a physical device model.

    ``base_time`` is the typical execution time in microseconds and sets the
    log-normal body's median; ``dispersion`` (also microseconds) controls the
    body spread. With probability ``spike_probability`` a run additionally
    pays a delay of ``spike_scale * base_time``, mimicking scheduler noise.
    """

    model: DeviceModel
    base_time: float
    dispersion: float
    spike_probability: float
    spike_scale: float

    def validate(self) -> None:
        if self.base_time <= 0:
            raise ConfigurationError(f"{self.model.value}: base_time must be > 0")
        if self.dispersion <= 0:
            raise ConfigurationError(f"{self.model.value}: dispersion must be > 0")
        if not 0.0 <= self.spike_probability <= 1.0:
            raise ConfigurationError(
                f"{self.model.value}: spike_probability must be in [0, 1]"
            )
        if self.spike_scale < 0:
            raise ConfigurationError(f"{self.model.value}: spike_scale must be >= 0")


# Desk-scale stand-ins for the four physical models. Older models are
# slower and noisier; the parameters are pairwise distinct so per-model
# feature distributions do not overlap.
DEFAULT_PROFILES: dict[DeviceModel, ModelProfile] = {
    DeviceModel.RPI1: ModelProfile(DeviceModel.RPI1, 40.0, 2.4, 0.010, 3.0),
    DeviceModel.RPI2: ModelProfile(DeviceModel.RPI2, 24.0, 1.4, 0.012, 3.0),
    DeviceModel.RPI3: ModelProfile(DeviceModel.RPI3, 12.0, 0.9, 0.015, 3.5),
    DeviceModel.RPI4: ModelProfile(DeviceModel.RPI4, 3.0, 0.3, 0.020, 4.0),
}

# Device counts of the physical collection the synthetic corpus mirrors
# at full scale (50000 groups per device).
FULL_SCALE_DEVICE_COUNTS: dict[DeviceModel, int] = {
    DeviceModel.RPI4: 12,
    DeviceModel.RPI3: 22,
    DeviceModel.RPI2: 5,
    DeviceModel.RPI1: 16,
}
FULL_SCALE_GROUPS_PER_DEVICE = 50000

# Desk-scale defaults keep a full corpus build and training run under
# minutes (25 devices x 320 groups = 8000 rows). The per-model skew mirrors
# the physical collection's imbalance, RPI2 being the under-represented one.
DESK_DEVICE_COUNTS: dict[DeviceModel, int] = {
    DeviceModel.RPI1: 9,
    DeviceModel.RPI2: 3,
    DeviceModel.RPI3: 9,
    DeviceModel.RPI4: 4,
}
DESK_GROUPS_PER_DEVICE = 320


@dataclass(frozen=True)
class TimingGroup:
    """One group of execution times (microseconds) from one device."""

    samples: np.ndarray
    model: DeviceModel
    device_id: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size < 2:
            raise InvalidInputError("a timing group needs at least 2 samples")
        if not np.all(samples > 0):
            raise InvalidInputError("execution times must be strictly positive")


@dataclass(frozen=True)
class FeatureVector:
    """The 13 statistical features of one timing group, plus its labels."""

    min: float
    max: float
    mean: float
    median: float
    std_dev: float
    mode: float
    sum: float
    min_decrease: float
    max_decrease: float
    decrease_sum: float
    min_increase: float
    max_increase: float
    increase_sum: float
    model: DeviceModel
    device_id: int

    def features(self) -> tuple[float, ...]:
        """The 13 numeric features in canonical column order."""
        return tuple(getattr(self, name) for name in FEATURE_NAMES)


def generate_timing_group(
    profile: ModelProfile,
    device_id: int,
    rng_seed: int,
    group_size: int = DEFAULT_GROUP_SIZE,
) -> TimingGroup:
    """Draw one synthetic group of execution times for a device.

    Deterministic for a fixed seed. The body is log-normal with median
    ``base_time``; spike positions are Bernoulli and add a fixed delay of
    ``spike_scale * base_time``.
    """
    profile.validate()
    if group_size < 2:
        raise ConfigurationError("group_size must be >= 2")
    rng = np.random.default_rng(rng_seed)
    sigma = math.log1p(profile.dispersion / profile.base_time)
    body = profile.base_time * rng.lognormal(mean=0.0, sigma=sigma, size=group_size)
    spikes = rng.random(group_size) < profile.spike_probability
    samples = body + spikes * (profile.spike_scale * profile.base_time)
    return TimingGroup(samples=samples, model=profile.model, device_id=device_id)


def extract_features(group: TimingGroup) -> FeatureVector:
    """Compute the 13-feature statistical fingerprint of a timing group.

    Decrease/increase features come from consecutive differences
    ``d[i] = samples[i+1] - samples[i]``: the decreases are the negative
    differences (min = most negative, max = closest to zero) and the
    increases the positive ones, with sums over each side. A side with no
    differences contributes zeros. The mode is taken after rounding samples
    to one decimal place, ties broken by the smallest value; the standard
    deviation is the population one.
    """
    s = group.samples
    if s.size < 2:
        raise InvalidInputError("feature extraction needs at least 2 samples")

    diffs = np.diff(s)
    decreases = diffs[diffs < 0]
    increases = diffs[diffs > 0]

    if decreases.size:
        min_decrease = float(decreases.min())
        max_decrease = float(decreases.max())
        decrease_sum = float(decreases.sum())
    else:
        min_decrease = max_decrease = decrease_sum = 0.0
    if increases.size:
        min_increase = float(increases.min())
        max_increase = float(increases.max())
        increase_sum = float(increases.sum())
    else:
        min_increase = max_increase = increase_sum = 0.0

    rounded = np.round(s, 1)
    values, counts = np.unique(rounded, return_counts=True)
    mode = float(values[np.argmax(counts)])  # unique() sorts, argmax takes first

    return FeatureVector(
        min=float(s.min()),
        max=float(s.max()),
        mean=float(s.mean()),
        median=float(np.median(s)),
        std_dev=float(s.std()),
        mode=mode,
        sum=float(s.sum()),
        min_decrease=min_decrease,
        max_decrease=max_decrease,
        decrease_sum=decrease_sum,
        min_increase=min_increase,
        max_increase=max_increase,
        increase_sum=increase_sum,
        model=group.model,
        device_id=group.device_id,
    )


def build_corpus(
    profiles: Mapping[DeviceModel, ModelProfile],
    device_counts: Mapping[DeviceModel, int],
    groups_per_device: int,
    seed: int,
    group_size: int = DEFAULT_GROUP_SIZE,
) -> list[FeatureVector]:
    """Generate a deterministic corpus of feature vectors.

    All devices collect in parallel, so rows come out in collection order:
    group index major, devices cycling within each group index. Chronological
    (unshuffled) splits downstream therefore cover every device and class.
    Device ids are globally unique across models; each device keeps its own
    seed stream, so its rows do not depend on the emission order.
    """
    if groups_per_device < 1:
        raise ConfigurationError("groups_per_device must be >= 1")
    for model in MODELS:
        if model not in profiles:
            raise ConfigurationError(f"missing profile for {model.value}")
        if device_counts.get(model, 0) < 1:
            raise ConfigurationError(f"device count for {model.value} must be >= 1")

    devices: list[tuple[ModelProfile, int]] = []
    for model in MODELS:
        for _ in range(device_counts[model]):
            devices.append((profiles[model], len(devices)))

    total_groups = len(devices) * groups_per_device
    seeds = np.random.SeedSequence(seed).generate_state(total_groups, dtype=np.uint64)

    rows: list[FeatureVector] = []
    for group_index in range(groups_per_device):
        for profile, device_id in devices:
            group = generate_timing_group(
                profile,
                device_id,
                int(seeds[device_id * groups_per_device + group_index]),
                group_size,
            )
            rows.append(extract_features(group))
    return rows


def rows_to_arrays(
    rows: Sequence[FeatureVector],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack feature vectors into (features, class labels, device ids)."""
    features = np.array([row.features() for row in rows], dtype=np.float64)
    labels = np.array([model_index(row.model) for row in rows], dtype=np.int64)
    device_ids = np.array([row.device_id for row in rows], dtype=np.int64)
    return features, labels, device_ids


@dataclass(frozen=True)
class ReaderConfig:
    """Adapter for external datasets whose header differs from ours.

    ``columns`` maps each canonical column name to the name used in the
    file; unmapped names are looked up as-is (case-insensitively).
    ``label_values`` maps raw label strings to canonical model names for
    files that do not spell the model as ``RPI<n>``.
    """

    columns: Mapping[str, str] | None = None
    label_values: Mapping[str, str] | None = None

    def file_column(self, canonical: str) -> str:
        if self.columns and canonical in self.columns:
            return self.columns[canonical]
        return canonical

    def parse_label(self, raw: str) -> DeviceModel:
        if self.label_values and raw in self.label_values:
            return DeviceModel.parse(self.label_values[raw])
        return DeviceModel.parse(raw)


def write_dataset(rows: Sequence[FeatureVector], path: str | os.PathLike) -> None:
    """Write feature vectors as CSV (UTF-8, ``.`` decimal separator)."""
    if not rows:
        raise InvalidInputError("refusing to write an empty dataset")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(
                [repr(value) for value in row.features()]
                + [row.model.value, row.device_id]
            )
    os.replace(tmp_path, path)


def read_dataset(
    path: str | os.PathLike, reader: ReaderConfig | None = None
) -> list[FeatureVector]:
    """Read a dataset CSV, optionally adapting a foreign column layout.

    The 13 feature columns and the model column are required; a device-id
    column is used when present and defaults to 0 otherwise. Malformed rows
    raise :class:`DatasetFormatError` naming the line.
    """
    reader = reader or ReaderConfig()
    with open(path, "r", encoding="utf-8", newline="") as handle:
        csv_rows = csv.reader(handle)
        try:
            header = next(csv_rows)
        except StopIteration:
            raise DatasetFormatError("empty dataset file") from None

        positions = {name.strip().lower(): i for i, name in enumerate(header)}

        def locate(canonical: str) -> int | None:
            return positions.get(reader.file_column(canonical).strip().lower())

        column_index: dict[str, int] = {}
        for name in FEATURE_NAMES + ("model",):
            index = locate(name)
            if index is None:
                raise DatasetFormatError(
                    f"missing column {reader.file_column(name)!r} in header"
                )
            column_index[name] = index
        device_index = locate("device_id")

        rows: list[FeatureVector] = []
        for line_num, raw in enumerate(csv_rows, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise DatasetFormatError(
                    f"expected {len(header)} columns, found {len(raw)}", line=line_num
                )
            values: dict[str, float] = {}
            for name in FEATURE_NAMES:
                cell = raw[column_index[name]]
                try:
                    values[name] = float(cell)
                except ValueError:
                    raise DatasetFormatError(
                        f"non-numeric value {cell!r} for column {name!r}",
                        line=line_num,
                    ) from None
            try:
                model = reader.parse_label(raw[column_index["model"]].strip())
            except ValueError as exc:
                raise DatasetFormatError(str(exc), line=line_num) from None
            if device_index is not None:
                try:
                    device_id = int(float(raw[device_index]))
                except ValueError:
                    raise DatasetFormatError(
                        f"non-integer device id {raw[device_index]!r}", line=line_num
                    ) from None
            else:
                device_id = 0
            rows.append(FeatureVector(**values, model=model, device_id=device_id))
    if not rows:
        raise DatasetFormatError("dataset contains a header but no rows")
    return rows
