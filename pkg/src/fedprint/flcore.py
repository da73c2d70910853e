"""Federated scenario orchestration.

Covers the pieces the server and organizations run around the model
itself: splitting a corpus into per-organization datasets (device-level,
so the class skew between organizations survives), the min-max
normalization handshake, the round loop, and the centralized baseline the
federated runs are compared against.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .aggregation import Aggregator, ClientUpdate
from .errors import AggregationError, ConfigurationError, InvalidInputError
from .fingerprint import MODELS, DeviceModel, FeatureVector, model_index, rows_to_arrays
from .mlp import (
    AdamState,
    MlpArchitecture,
    ModelWeights,
    evaluate,
    init_weights,
    train_epoch,
)


@dataclass
class DataSplit:
    """A block of labeled rows: features (n x 13), class labels, device ids."""

    features: np.ndarray
    labels: np.ndarray
    device_ids: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]

    def copy(self) -> "DataSplit":
        return DataSplit(
            self.features.copy(), self.labels.copy(), self.device_ids.copy()
        )


@dataclass
class Organization:
    """One federation participant: its local train/validation data plus the
    rows it contributes to the server-side test set."""

    org_id: int
    train: DataSplit
    validation: DataSplit
    test: DataSplit

    @property
    def models_present(self) -> tuple[DeviceModel, ...]:
        present = np.unique(
            np.concatenate([self.train.labels, self.validation.labels])
        )
        return tuple(MODELS[i] for i in present)


@dataclass(frozen=True)
class FeatureBounds:
    """Global per-feature min/max agreed in the normalization handshake."""

    minimum: np.ndarray
    maximum: np.ndarray


@dataclass(frozen=True)
class TrainingParams:
    """Model/optimizer settings shared by both training modes."""

    architecture: MlpArchitecture = MlpArchitecture()
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def fresh_adam(self) -> AdamState:
        return AdamState.fresh(
            self.architecture,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
        )


@dataclass(frozen=True)
class ScenarioConfig:
    """Federated scenario settings.

    ``distribution`` assigns device models to organizations. Two forms:
    a set of models per org (devices of a model are dealt round-robin, in
    seeded order, over the orgs listing it) or an exact device count per
    model per org (the counts must add up to the devices the corpus
    contains). Either way a device's rows never straddle organizations.
    """

    org_count: int = 5
    distribution: Mapping[int, tuple[DeviceModel, ...] | Mapping[DeviceModel, int]] = field(
        default_factory=lambda: DEFAULT_DISTRIBUTION
    )
    rounds: int = 90
    local_epochs: int = 1
    client_fraction: float = 1.0
    batch_size: int = 4
    seed: int = 11
    train_fraction: float = 0.8
    validation_fraction: float = 0.1
    params: TrainingParams = TrainingParams()

    def validate(self) -> None:
        if self.org_count < 1:
            raise ConfigurationError("org_count must be >= 1")
        if set(self.distribution) != set(range(self.org_count)):
            raise ConfigurationError(
                "distribution must map exactly the org ids 0..org_count-1"
            )
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigurationError("client_fraction must be in (0, 1]")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must be in (0, 1)")
        if self.validation_fraction <= 0.0 or (
            self.train_fraction + self.validation_fraction >= 1.0
        ):
            raise ConfigurationError(
                "train_fraction + validation_fraction must leave room for test rows"
            )


# Shipped default: org sizes and class coverage are deliberately uneven.
# Org 1 (the first to turn malicious in attack runs) holds the majority of
# the two largest classes; orgs 0 and 3 are same-shaped small organizations
# holding exactly two classes each; org 4 covers all four models.
DEFAULT_DISTRIBUTION: dict[int, dict[DeviceModel, int]] = {
    0: {DeviceModel.RPI1: 1, DeviceModel.RPI3: 1},
    1: {DeviceModel.RPI1: 6, DeviceModel.RPI3: 6},
    2: {DeviceModel.RPI2: 1, DeviceModel.RPI4: 2},
    3: {DeviceModel.RPI1: 1, DeviceModel.RPI3: 1},
    4: {DeviceModel.RPI1: 1, DeviceModel.RPI2: 2, DeviceModel.RPI3: 1, DeviceModel.RPI4: 2},
}


def derive_seed(*parts: int) -> int:
    """Stable scalar seed derived from integer parts (replay-exact)."""
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


def _split_three(
    features: np.ndarray,
    labels: np.ndarray,
    device_ids: np.ndarray,
    train_fraction: float,
    validation_fraction: float,
) -> tuple[DataSplit, DataSplit, DataSplit]:
    """Chronological train/validation/test split, no shuffling."""
    n = features.shape[0]
    n_train = int(n * train_fraction)
    n_val = int(n * validation_fraction)
    pieces = []
    for start, stop in ((0, n_train), (n_train, n_train + n_val), (n_train + n_val, n)):
        pieces.append(
            DataSplit(features[start:stop], labels[start:stop], device_ids[start:stop])
        )
    return pieces[0], pieces[1], pieces[2]


def partition_scenario(
    corpus: Sequence[FeatureVector], config: ScenarioConfig, seed: int
) -> list[Organization]:
    """Distribute a corpus over organizations, device by device.

    Every row of a device lands in the same organization; inside an
    organization rows keep corpus (chronological) order and are split
    80/10/10 into train/validation/test contribution.
    """
    config.validate()
    features, labels, device_ids = rows_to_arrays(corpus)

    corpus_models = {model_index_to_model(i) for i in np.unique(labels)}
    covered = {m for models in config.distribution.values() for m in models}
    missing = corpus_models - covered
    if missing:
        raise ConfigurationError(
            "distribution covers no org for models: "
            + ", ".join(sorted(m.value for m in missing))
        )

    rng = np.random.default_rng(derive_seed(seed, 0x9A57))
    assignment: dict[int, int] = {}
    for model in sorted(corpus_models, key=model_index):
        entries = sorted(
            (org_id, models)
            for org_id, models in config.distribution.items()
            if model in models
        )
        devices = sorted(
            int(d) for d in np.unique(device_ids[labels == model_index(model)])
        )
        devices = [devices[i] for i in rng.permutation(len(devices))]
        counted = any(isinstance(models, Mapping) for _, models in entries)
        if counted:
            wanted = {
                org_id: int(models[model]) if isinstance(models, Mapping) else -1
                for org_id, models in entries
            }
            if any(count < 1 for count in wanted.values()):
                raise ConfigurationError(
                    "distribution mixes counted and uncounted entries for "
                    f"{model.value}"
                )
            if sum(wanted.values()) != len(devices):
                raise ConfigurationError(
                    f"distribution requests {sum(wanted.values())} "
                    f"{model.value} devices but the corpus has {len(devices)}"
                )
            cursor = 0
            for org_id, _ in entries:
                for device in devices[cursor : cursor + wanted[org_id]]:
                    assignment[device] = org_id
                cursor += wanted[org_id]
        else:
            eligible = [org_id for org_id, _ in entries]
            for position, device in enumerate(devices):
                assignment[device] = eligible[position % len(eligible)]

    orgs: list[Organization] = []
    row_org = np.array([assignment[int(d)] for d in device_ids])
    for org_id in range(config.org_count):
        mask = row_org == org_id
        if not mask.any():
            raise ConfigurationError(f"organization {org_id} received no rows")
        train, validation, test = _split_three(
            features[mask],
            labels[mask],
            device_ids[mask],
            config.train_fraction,
            config.validation_fraction,
        )
        if len(train) == 0 or len(validation) == 0:
            raise ConfigurationError(
                f"organization {org_id} has too few rows to split"
            )
        orgs.append(Organization(org_id, train, validation, test))
    return orgs


def model_index_to_model(index: int) -> DeviceModel:
    return MODELS[int(index)]


def normalization_handshake(orgs: Sequence[Organization]) -> FeatureBounds:
    """Global per-feature (min, max) over the organizations' training rows.

    Mirrors the initialization step where the server collects each client's
    local bounds; only training rows participate, so the test set never
    leaks into preprocessing.
    """
    if not orgs:
        raise InvalidInputError("no organizations")
    for org in orgs:
        if len(org.train) == 0:
            raise InvalidInputError(f"organization {org.org_id} has no training rows")
    minimum = np.min([org.train.features.min(axis=0) for org in orgs], axis=0)
    maximum = np.max([org.train.features.max(axis=0) for org in orgs], axis=0)
    return FeatureBounds(minimum=minimum, maximum=maximum)


def scale_features(features: np.ndarray, bounds: FeatureBounds) -> np.ndarray:
    """Affine min-max map. Out-of-range values are NOT clipped; features with
    max = min map to 0."""
    span = bounds.maximum - bounds.minimum
    safe = np.where(span == 0.0, 1.0, span)
    scaled = (features - bounds.minimum) / safe
    scaled[:, span == 0.0] = 0.0
    return scaled


def normalize_organizations(
    orgs: Sequence[Organization], bounds: FeatureBounds
) -> list[Organization]:
    """Same bounds everywhere; returns new organizations, inputs untouched."""
    out = []
    for org in orgs:
        out.append(
            Organization(
                org_id=org.org_id,
                train=DataSplit(
                    scale_features(org.train.features, bounds),
                    org.train.labels.copy(),
                    org.train.device_ids.copy(),
                ),
                validation=DataSplit(
                    scale_features(org.validation.features, bounds),
                    org.validation.labels.copy(),
                    org.validation.device_ids.copy(),
                ),
                test=DataSplit(
                    scale_features(org.test.features, bounds),
                    org.test.labels.copy(),
                    org.test.device_ids.copy(),
                ),
            )
        )
    return out


def global_test_set(orgs: Sequence[Organization]) -> DataSplit:
    """Union of the organizations' held-out test contributions."""
    return DataSplit(
        np.concatenate([org.test.features for org in orgs]),
        np.concatenate([org.test.labels for org in orgs]),
        np.concatenate([org.test.device_ids for org in orgs]),
    )


@dataclass
class RoundMetrics:
    """What the server records after each aggregation."""

    round_index: int
    org_validation_accuracy: dict[int, float]
    org_train_loss: dict[int, float]
    test_accuracy: float
    confusion: np.ndarray
    aggregator_detail: dict

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "org_validation_accuracy": {
                str(k): v for k, v in self.org_validation_accuracy.items()
            },
            "org_train_loss": {str(k): v for k, v in self.org_train_loss.items()},
            "test_accuracy": self.test_accuracy,
            "confusion": self.confusion.tolist(),
            **{
                k: v if not isinstance(v, dict) else {str(i): s for i, s in v.items()}
                for k, v in self.aggregator_detail.items()
            },
        }


def run_federated(
    orgs: Sequence[Organization],
    config: ScenarioConfig,
    aggregator: Aggregator,
    initial_weights: ModelWeights | None = None,
    progress: Callable[[str], None] | None = None,
) -> tuple[ModelWeights, list[RoundMetrics]]:
    """The federated round loop.

    Every round: sample ``max(floor(C*K), 1)`` organizations, broadcast the
    global weights, let each run its local epochs from a fresh optimizer
    state (the server ships weights only), aggregate the returned updates,
    then record per-org validation accuracy and global test metrics.
    Organizations must already be normalized with shared bounds.
    """
    config.validate()
    k = len(orgs)
    weights = (
        initial_weights.copy()
        if initial_weights is not None
        else init_weights(config.params.architecture, config.seed)
    )
    test = global_test_set(orgs)
    metrics: list[RoundMetrics] = []

    for round_index in range(config.rounds):
        m = max(int(config.client_fraction * k), 1)
        if m < k:
            sample_rng = np.random.default_rng(
                derive_seed(config.seed, 0x5E1, round_index)
            )
            sampled = sorted(sample_rng.choice(k, size=m, replace=False).tolist())
        else:
            sampled = list(range(k))

        updates: list[ClientUpdate] = []
        losses: dict[int, float] = {}
        for org_pos in sampled:
            org = orgs[org_pos]
            local = weights
            adam = config.params.fresh_adam()
            loss = 0.0
            for epoch in range(config.local_epochs):
                local, adam, loss = train_epoch(
                    local,
                    adam,
                    org.train.features,
                    org.train.labels,
                    config.batch_size,
                    derive_seed(config.seed, round_index, epoch),
                )
            updates.append(ClientUpdate(org.org_id, local, len(org.train)))
            losses[org.org_id] = loss

        try:
            weights, detail = aggregator(updates, weights)
        except Exception as exc:
            raise AggregationError(f"round {round_index}: {exc}") from exc

        org_val = {
            org.org_id: evaluate(weights, org.validation.features, org.validation.labels)[0]
            for org in orgs
        }
        test_accuracy, confusion = evaluate(weights, test.features, test.labels)
        metrics.append(
            RoundMetrics(
                round_index=round_index,
                org_validation_accuracy=org_val,
                org_train_loss=losses,
                test_accuracy=test_accuracy,
                confusion=confusion,
                aggregator_detail=detail,
            )
        )
        if progress is not None:
            progress(
                f"round {round_index + 1}/{config.rounds}: "
                f"test_accuracy={test_accuracy:.6f}"
            )
    return weights, metrics


@dataclass(frozen=True)
class CentralizedConfig:
    """Baseline training settings.

    ``train_fraction`` covers training plus validation (the test split is
    the remainder); ``validation_fraction`` is carved out of it, both as
    fractions of the whole corpus.
    """

    max_epochs: int = 100
    patience: int = 20
    batch_size: int = 32
    seed: int = 11
    train_fraction: float = 0.8
    validation_fraction: float = 0.1
    params: TrainingParams = TrainingParams()

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigurationError("patience must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must be in (0, 1)")
        if not 0.0 < self.validation_fraction < self.train_fraction:
            raise ConfigurationError(
                "validation_fraction must be positive and smaller than train_fraction"
            )


@dataclass
class CentralizedResult:
    epoch_train_loss: list[float]
    epoch_validation_accuracy: list[float]
    best_epoch: int
    test_accuracy: float
    confusion: np.ndarray
    bounds: FeatureBounds


def run_centralized(
    corpus: Sequence[FeatureVector],
    config: CentralizedConfig,
    progress: Callable[[str], None] | None = None,
) -> tuple[ModelWeights, CentralizedResult]:
    """Centralized baseline: one model over the whole corpus.

    Chronological split (train / validation / test, no shuffling); min-max
    bounds are fit on the training rows only. Trains up to ``max_epochs``
    with early stopping once validation accuracy has not improved for
    ``patience`` epochs (patience 0 stops at the first non-improving
    epoch), then restores the best-validation weights.
    """
    config.validate()
    if not corpus:
        raise InvalidInputError("empty corpus")
    features, labels, device_ids = rows_to_arrays(corpus)
    train, validation, test = _split_three(
        features,
        labels,
        device_ids,
        config.train_fraction - config.validation_fraction,
        config.validation_fraction,
    )

    bounds = FeatureBounds(
        minimum=train.features.min(axis=0), maximum=train.features.max(axis=0)
    )
    train_x = scale_features(train.features, bounds)
    val_x = scale_features(validation.features, bounds)
    test_x = scale_features(test.features, bounds)

    weights = init_weights(config.params.architecture, config.seed)
    adam = config.params.fresh_adam()

    best_weights = weights.copy()
    best_accuracy = -1.0
    best_epoch = -1
    since_best = 0
    stop_after = config.patience if config.patience >= 1 else 1

    train_losses: list[float] = []
    val_accuracies: list[float] = []
    for epoch in range(config.max_epochs):
        weights, adam, loss = train_epoch(
            weights,
            adam,
            train_x,
            train.labels,
            config.batch_size,
            derive_seed(config.seed, epoch),
        )
        accuracy, _ = evaluate(weights, val_x, validation.labels)
        train_losses.append(loss)
        val_accuracies.append(accuracy)
        if progress is not None:
            progress(
                f"epoch {epoch + 1}/{config.max_epochs}: "
                f"loss={loss:.6f} val_accuracy={accuracy:.6f}"
            )
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_weights = weights.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= stop_after:
                break

    test_accuracy, confusion = evaluate(best_weights, test_x, test.labels)
    return best_weights, CentralizedResult(
        epoch_train_loss=train_losses,
        epoch_validation_accuracy=val_accuracies,
        best_epoch=best_epoch,
        test_accuracy=test_accuracy,
        confusion=confusion,
        bounds=bounds,
    )
