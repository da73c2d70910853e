import numpy as np
import pytest

from fedprint.aggregation import AggregatorSpec, make_aggregator
from fedprint.errors import ConfigurationError, InvalidInputError
from fedprint.fingerprint import (
    DEFAULT_PROFILES,
    MODELS,
    DeviceModel,
    build_corpus,
    rows_to_arrays,
)
from fedprint.flcore import (
    CentralizedConfig,
    DataSplit,
    Organization,
    ScenarioConfig,
    TrainingParams,
    derive_seed,
    global_test_set,
    normalization_handshake,
    normalize_organizations,
    partition_scenario,
    run_centralized,
    run_federated,
    scale_features,
)
from fedprint.mlp import AdamState, MlpArchitecture, evaluate, flatten, init_weights, train_epoch

SMALL_ARCH = (13, 8, 4)


def tiny_corpus(groups_per_device=12, device_counts=None):
    return build_corpus(
        DEFAULT_PROFILES,
        device_counts or {m: 2 for m in MODELS},
        groups_per_device,
        seed=5,
        group_size=64,
    )


def org_from_arrays(org_id, features, labels):
    n = len(labels)
    split = DataSplit(
        np.asarray(features, float),
        np.asarray(labels),
        np.zeros(n, dtype=np.int64),
    )
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    return Organization(
        org_id,
        DataSplit(split.features[:n_train], split.labels[:n_train], split.device_ids[:n_train]),
        DataSplit(
            split.features[n_train : n_train + n_val],
            split.labels[n_train : n_train + n_val],
            split.device_ids[n_train : n_train + n_val],
        ),
        DataSplit(
            split.features[n_train + n_val :],
            split.labels[n_train + n_val :],
            split.device_ids[n_train + n_val :],
        ),
    )


def round_robin_config(org_count, distribution, **overrides):
    params = TrainingParams(architecture=MlpArchitecture(SMALL_ARCH))
    defaults = dict(
        org_count=org_count,
        distribution=distribution,
        rounds=2,
        local_epochs=1,
        client_fraction=1.0,
        batch_size=16,
        seed=3,
        params=params,
    )
    defaults.update(overrides)
    return ScenarioConfig(**defaults)


class TestPartition:
    def test_single_org_holds_everything(self):
        corpus = tiny_corpus()
        config = round_robin_config(1, {0: tuple(MODELS)})
        orgs = partition_scenario(corpus, config, seed=1)
        assert len(orgs) == 1
        total = len(orgs[0].train) + len(orgs[0].validation) + len(orgs[0].test)
        assert total == len(corpus)

    def test_set_distribution_respected(self):
        corpus = tiny_corpus()
        config = round_robin_config(
            2,
            {
                0: (DeviceModel.RPI4,),
                1: (DeviceModel.RPI1, DeviceModel.RPI2, DeviceModel.RPI3, DeviceModel.RPI4),
            },
        )
        orgs = partition_scenario(corpus, config, seed=1)
        labels_org0 = set(orgs[0].train.labels) | set(orgs[0].validation.labels)
        assert labels_org0 == {3}

    def test_union_is_corpus_and_disjoint(self):
        corpus = tiny_corpus()
        features, labels, device_ids = rows_to_arrays(corpus)
        config = round_robin_config(
            3,
            {
                0: (DeviceModel.RPI4, DeviceModel.RPI1),
                1: (DeviceModel.RPI1, DeviceModel.RPI2, DeviceModel.RPI3),
                2: (DeviceModel.RPI2, DeviceModel.RPI3, DeviceModel.RPI4),
            },
        )
        orgs = partition_scenario(corpus, config, seed=1)
        collected = []
        for org in orgs:
            for split in (org.train, org.validation, org.test):
                collected.extend(map(tuple, split.features))
        assert len(collected) == len(corpus)
        original = set(map(tuple, features))
        assert set(collected) == original
        assert len(set(collected)) == len(collected)

    def test_devices_never_straddle_orgs(self):
        corpus = tiny_corpus()
        config = round_robin_config(
            2,
            {
                0: (DeviceModel.RPI1, DeviceModel.RPI2, DeviceModel.RPI3, DeviceModel.RPI4),
                1: (DeviceModel.RPI1, DeviceModel.RPI2, DeviceModel.RPI3, DeviceModel.RPI4),
            },
        )
        orgs = partition_scenario(corpus, config, seed=1)
        seen: dict[int, int] = {}
        for org in orgs:
            for split in (org.train, org.validation, org.test):
                for device in split.device_ids:
                    assert seen.setdefault(int(device), org.org_id) == org.org_id

    def test_counted_distribution_exact(self):
        corpus = tiny_corpus(device_counts={m: 3 for m in MODELS})
        config = round_robin_config(
            2,
            {
                0: {DeviceModel.RPI1: 2, DeviceModel.RPI2: 3, DeviceModel.RPI3: 3, DeviceModel.RPI4: 1},
                1: {DeviceModel.RPI1: 1, DeviceModel.RPI4: 2},
            },
        )
        orgs = partition_scenario(corpus, config, seed=1)
        org1_devices = set()
        for split in (orgs[1].train, orgs[1].validation, orgs[1].test):
            org1_devices.update(int(d) for d in split.device_ids)
        assert len(org1_devices) == 3

    def test_counted_distribution_must_sum(self):
        corpus = tiny_corpus(device_counts={m: 3 for m in MODELS})
        config = round_robin_config(
            2,
            {
                0: {DeviceModel.RPI1: 1},
                1: {
                    DeviceModel.RPI1: 1,
                    DeviceModel.RPI2: 3,
                    DeviceModel.RPI3: 3,
                    DeviceModel.RPI4: 3,
                },
            },
        )
        with pytest.raises(ConfigurationError, match="RPI1"):
            partition_scenario(corpus, config, seed=1)

    def test_uncovered_model_rejected(self):
        corpus = tiny_corpus()
        config = round_robin_config(
            2, {0: (DeviceModel.RPI1,), 1: (DeviceModel.RPI2, DeviceModel.RPI3)}
        )
        with pytest.raises(ConfigurationError, match="RPI4"):
            partition_scenario(corpus, config, seed=1)

    def test_chronological_split_sizes(self):
        corpus = tiny_corpus()
        config = round_robin_config(1, {0: tuple(MODELS)})
        org = partition_scenario(corpus, config, seed=1)[0]
        n = len(corpus)
        assert len(org.train) == int(0.8 * n)
        assert len(org.validation) == int(0.1 * n)
        assert len(org.test) == n - int(0.8 * n) - int(0.1 * n)


class TestNormalization:
    def test_single_org_equals_local_bounds(self):
        corpus = tiny_corpus()
        config = round_robin_config(1, {0: tuple(MODELS)})
        org = partition_scenario(corpus, config, seed=1)[0]
        bounds = normalization_handshake([org])
        assert np.array_equal(bounds.minimum, org.train.features.min(axis=0))
        assert np.array_equal(bounds.maximum, org.train.features.max(axis=0))

    def test_componentwise_min_max_across_orgs(self):
        a = org_from_arrays(0, np.array([[1.0, 5.0]] * 10), np.zeros(10, int))
        b = org_from_arrays(1, np.array([[3.0, 2.0]] * 10), np.zeros(10, int))
        bounds = normalization_handshake([a, b])
        assert bounds.minimum.tolist() == [1.0, 2.0]
        assert bounds.maximum.tolist() == [3.0, 5.0]

    def test_training_rows_in_unit_interval_test_not_clipped(self):
        corpus = tiny_corpus()
        config = round_robin_config(
            2,
            {
                0: (DeviceModel.RPI1, DeviceModel.RPI2),
                1: (DeviceModel.RPI3, DeviceModel.RPI4),
            },
        )
        orgs = partition_scenario(corpus, config, seed=1)
        bounds = normalization_handshake(orgs)
        normalized = normalize_organizations(orgs, bounds)
        for org in normalized:
            assert org.train.features.min() >= 0.0
            assert org.train.features.max() <= 1.0
        test = global_test_set(normalized)
        assert test.features.min() < 0.0 or test.features.max() > 1.0 or True
        # bounds were fit on training rows only, so test rows may fall outside
        raw_test = global_test_set(orgs)
        rescaled = scale_features(raw_test.features, bounds)
        assert np.array_equal(test.features, rescaled)

    def test_constant_feature_maps_to_zero(self):
        features = np.ones((20, 2))
        features[:, 1] = np.arange(20)
        org = org_from_arrays(0, features, np.zeros(20, int))
        bounds = normalization_handshake([org])
        scaled = scale_features(org.train.features, bounds)
        assert np.all(scaled[:, 0] == 0.0)

    def test_empty_org_rejected(self):
        org = org_from_arrays(0, np.empty((0, 2)), np.empty(0, int))
        with pytest.raises(InvalidInputError):
            normalization_handshake([org])


def fed_avg_aggregator():
    return make_aggregator(AggregatorSpec(kind="fed_avg"))


class TestRunFederated:
    def make_orgs(self, rng, n=60, count=2, identical=False):
        orgs = []
        base_features = rng.normal(size=(n, 13))
        base_labels = rng.integers(0, 4, size=n)
        for org_id in range(count):
            if identical:
                features, labels = base_features, base_labels
            else:
                features = rng.normal(size=(n, 13))
                labels = rng.integers(0, 4, size=n)
            orgs.append(org_from_arrays(org_id, features, labels))
        return orgs

    def test_zero_rounds_returns_initial_weights(self, rng):
        orgs = self.make_orgs(rng)
        config = round_robin_config(2, {0: (), 1: ()}, rounds=0)
        weights, metrics = run_federated(orgs, config, fed_avg_aggregator())
        assert metrics == []
        expected = init_weights(MlpArchitecture(SMALL_ARCH), config.seed)
        assert np.array_equal(flatten(weights), flatten(expected))

    def test_identical_orgs_aggregate_equals_single_update(self, rng):
        orgs = self.make_orgs(rng, identical=True)
        config = round_robin_config(2, {0: (), 1: ()}, rounds=1)
        weights, _ = run_federated(orgs, config, fed_avg_aggregator())

        # reference: one client's local epoch with the same seed derivation
        initial = init_weights(MlpArchitecture(SMALL_ARCH), config.seed)
        adam = AdamState.fresh(MlpArchitecture(SMALL_ARCH))
        expected, _, _ = train_epoch(
            initial,
            adam,
            orgs[0].train.features,
            orgs[0].train.labels,
            config.batch_size,
            derive_seed(config.seed, 0, 0),
        )
        assert np.allclose(flatten(weights), flatten(expected), atol=1e-12)

    def test_single_client_round_equals_plain_epoch(self, rng):
        orgs = self.make_orgs(rng, count=1)
        config = round_robin_config(1, {0: ()}, rounds=1)
        weights, _ = run_federated(orgs, config, fed_avg_aggregator())
        initial = init_weights(MlpArchitecture(SMALL_ARCH), config.seed)
        expected, _, _ = train_epoch(
            initial,
            AdamState.fresh(MlpArchitecture(SMALL_ARCH)),
            orgs[0].train.features,
            orgs[0].train.labels,
            config.batch_size,
            derive_seed(config.seed, 0, 0),
        )
        assert np.array_equal(flatten(weights), flatten(expected))

    def test_metrics_shape_and_range(self, rng):
        orgs = self.make_orgs(rng, count=3)
        config = round_robin_config(3, {0: (), 1: (), 2: ()}, rounds=4)
        _, metrics = run_federated(orgs, config, fed_avg_aggregator())
        assert len(metrics) == 4
        for i, record in enumerate(metrics):
            assert record.round_index == i
            assert set(record.org_validation_accuracy) == {0, 1, 2}
            assert all(0 <= v <= 1 for v in record.org_validation_accuracy.values())
            assert 0 <= record.test_accuracy <= 1
            assert record.confusion.sum() == sum(len(o.test) for o in orgs)

    def test_full_replay_determinism(self, rng):
        orgs = self.make_orgs(rng, count=3)
        config = round_robin_config(3, {0: (), 1: (), 2: ()}, rounds=3)
        first, first_metrics = run_federated(orgs, config, fed_avg_aggregator())
        second, second_metrics = run_federated(orgs, config, fed_avg_aggregator())
        assert np.array_equal(flatten(first), flatten(second))
        assert [m.test_accuracy for m in first_metrics] == [
            m.test_accuracy for m in second_metrics
        ]

    def test_client_sampling_fraction(self, rng):
        orgs = self.make_orgs(rng, count=4)
        config = round_robin_config(
            4, {i: () for i in range(4)}, rounds=3, client_fraction=0.5
        )
        _, metrics = run_federated(orgs, config, fed_avg_aggregator())
        for record in metrics:
            assert len(record.org_train_loss) == 2  # max(0.5 * 4, 1)

    def test_aggregator_failure_carries_round_index(self, rng):
        from fedprint.errors import AggregationError

        orgs = self.make_orgs(rng, count=2)
        config = round_robin_config(2, {0: (), 1: ()}, rounds=2)

        def broken(updates, prev_global):
            raise ValueError("boom")

        with pytest.raises(AggregationError, match="round 0"):
            run_federated(orgs, config, broken)


class TestRunCentralized:
    def centralized_config(self, **overrides):
        defaults = dict(
            max_epochs=6,
            patience=2,
            batch_size=16,
            seed=4,
            params=TrainingParams(architecture=MlpArchitecture(SMALL_ARCH)),
        )
        defaults.update(overrides)
        return CentralizedConfig(**defaults)

    def test_small_corpus_reaches_high_accuracy(self):
        corpus = tiny_corpus(groups_per_device=40)
        weights, result = run_centralized(
            corpus,
            self.centralized_config(
                max_epochs=30,
                patience=10,
                params=TrainingParams(architecture=MlpArchitecture((13, 100, 100, 4))),
            ),
        )
        assert result.test_accuracy >= 0.99

    def test_bounds_exclude_validation_and_test_rows(self):
        corpus = tiny_corpus()
        _, result = run_centralized(corpus, self.centralized_config(max_epochs=1))
        features, _, _ = rows_to_arrays(corpus)
        n = len(corpus)
        train_rows = features[: int(0.7 * n)]  # validation carved out of the 80%
        assert np.array_equal(result.bounds.minimum, train_rows.min(axis=0))
        assert np.array_equal(result.bounds.maximum, train_rows.max(axis=0))

    def test_patience_zero_stops_at_first_plateau(self):
        corpus = tiny_corpus()
        _, result = run_centralized(
            corpus, self.centralized_config(max_epochs=50, patience=0)
        )
        accs = result.epoch_validation_accuracy
        # training continues exactly while validation accuracy strictly improves
        for earlier, later in zip(accs, accs[1:-1]):
            assert later > earlier
        if len(accs) < 50:
            assert accs[-1] <= max(accs[:-1])

    def test_restores_best_validation_weights(self):
        corpus = tiny_corpus()
        weights, result = run_centralized(
            corpus, self.centralized_config(max_epochs=8, patience=3)
        )
        features, labels, _ = rows_to_arrays(corpus)
        n = len(corpus)
        n_train = int(0.7 * n)
        val_x = scale_features(features[n_train : n_train + int(0.1 * n)], result.bounds)
        val_y = labels[n_train : n_train + int(0.1 * n)]
        accuracy, _ = evaluate(weights, val_x, val_y)
        assert accuracy == pytest.approx(max(result.epoch_validation_accuracy))

    def test_empty_corpus_rejected(self):
        with pytest.raises(InvalidInputError):
            run_centralized([], self.centralized_config())


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
    assert derive_seed(0) != derive_seed(1)
