"""Acceptance suite: every criterion printed as one PASS/FAIL line.

Heavy artifacts (the default corpus and the full attack matrix) are built
once per session and shared across criteria. Stated runtime budgets are
asserted alongside the quality thresholds.
"""
import json
import time

import numpy as np
import pytest

from fedprint import experiment
from fedprint.cli import EXIT_OK, main
from fedprint.fingerprint import MODELS, model_index
from fedprint.mlp import (
    MlpArchitecture,
    flatten,
    forward,
    init_weights,
    unflatten,
)

pytestmark = pytest.mark.acceptance


def report(criterion: str, passed: bool, detail: str) -> None:
    marker = "PASS" if passed else "FAIL"
    print(f"[ACCEPTANCE] {criterion}: {marker} ({detail})")


@pytest.fixture(scope="session")
def centralized_run(desk_corpus, default_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("centralized")
    start = time.perf_counter()
    metrics = experiment.train_centralized(desk_corpus, default_config, out)
    return metrics, time.perf_counter() - start


@pytest.fixture(scope="session")
def federated_run(desk_corpus, default_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("federated")
    start = time.perf_counter()
    metrics = experiment.train_federated(desk_corpus, default_config, out)
    return metrics, time.perf_counter() - start


@pytest.fixture(scope="session")
def matrix_report(desk_corpus, default_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    return experiment.run_attack_matrix(desk_corpus, default_config, out)


def cells_of(matrix, aggregator):
    return [c for c in matrix["cells"] if c["aggregator"] == aggregator and "error" not in c]


def cell(matrix, aggregator, n_malicious, fraction):
    for c in cells_of(matrix, aggregator):
        if c["n_malicious"] == n_malicious and c["poison_fraction"] == fraction:
            return c
    raise AssertionError(f"missing cell {aggregator}/{n_malicious}/{fraction}")


def test_criterion_1_centralized_baseline(centralized_run):
    metrics, elapsed = centralized_run
    accuracy = metrics["final"]["test_accuracy"]
    ok = accuracy >= 0.99 and elapsed < 60.0
    report(
        "C1 centralized baseline",
        ok,
        f"accuracy={accuracy:.6f} (>=0.99), runtime={elapsed:.1f}s (<60s)",
    )
    assert accuracy >= 0.99
    assert elapsed < 60.0


def test_criterion_2_federated_parity(centralized_run, federated_run):
    central, _ = centralized_run
    federated, elapsed = federated_run
    gap = abs(
        federated["final"]["test_accuracy"] - central["final"]["test_accuracy"]
    )
    ok = gap <= 0.005 and elapsed < 180.0
    report(
        "C2 federated parity",
        ok,
        f"federated={federated['final']['test_accuracy']:.6f} "
        f"centralized={central['final']['test_accuracy']:.6f} "
        f"gap={gap:.6f} (<=0.005), runtime={elapsed:.1f}s (<180s)",
    )
    assert len(federated["rounds"]) == 30
    assert gap <= 0.005
    assert elapsed < 180.0


def test_criterion_3_fedavg_degradation(matrix_report):
    low = [
        cell(matrix_report, "fed_avg", n, f)["test_accuracy"]
        for n in (1, 2, 3)
        for f in (0.25, 0.5)
    ]
    high = [
        cell(matrix_report, "fed_avg", 3, f)["test_accuracy"] for f in (0.75, 1.0)
    ]
    ok = min(low) >= 0.85 and max(high) <= 0.35
    report(
        "C3 fedavg degradation trend",
        ok,
        f"min(acc | fraction<=0.5)={min(low):.4f} (>=0.85), "
        f"max(acc | 3 orgs, fraction>=0.75)={max(high):.4f} (<=0.35)",
    )
    assert min(low) >= 0.85
    assert max(high) <= 0.35


def test_criterion_4_median_robustness(matrix_report):
    median_acc = cell(matrix_report, "coord_median", 1, 1.0)["test_accuracy"]
    fedavg_acc = cell(matrix_report, "fed_avg", 1, 1.0)["test_accuracy"]
    ok = median_acc >= 0.85 and fedavg_acc <= 0.5
    report(
        "C4 median robustness",
        ok,
        f"median={median_acc:.4f} (>=0.85) vs fedavg={fedavg_acc:.4f} (<=0.5) "
        "at 1 malicious org, fraction 1.0",
    )
    assert median_acc >= 0.85
    assert fedavg_acc <= 0.5


def test_criterion_5_krum_constancy(matrix_report, default_config):
    attack_cells = [
        c for c in cells_of(matrix_report, "krum") if c["n_malicious"] > 0
    ]
    assert len(attack_cells) == 12
    accuracies = [c["test_accuracy"] for c in attack_cells]
    spread = max(accuracies) - min(accuracies)

    from fedprint.fingerprint import DeviceModel

    distribution = default_config["scenario"]["distribution"]
    column_ok = True
    selections = set()
    for c in attack_cells:
        picks = {r["krum_selected_org"] for r in c["rounds"]}
        selections |= picks
        allowed = {
            model_index(DeviceModel.parse(name))
            for org in picks
            for name in distribution[str(org)]
        }
        confusion = np.asarray(c["confusion"])
        for class_index in range(4):
            if class_index not in allowed and confusion[:, class_index].any():
                column_ok = False
    ok = spread <= 1e-9 and column_ok
    report(
        "C5 krum constancy",
        ok,
        f"accuracy spread across 12 cells={spread:.2e} (<=1e-9), "
        f"selected orgs={sorted(selections)}, "
        f"confusion columns limited to selected org's classes={column_ok}",
    )
    assert spread <= 1e-9
    assert column_ok


def test_criterion_6_zeno_vs_median(matrix_report):
    zeno_3_full = cell(matrix_report, "zeno", 3, 1.0)["test_accuracy"]
    median_3_full = cell(matrix_report, "coord_median", 3, 1.0)["test_accuracy"]
    zeno_2 = [
        cell(matrix_report, "zeno", 2, f)["test_accuracy"]
        for f in (0.25, 0.5, 0.75, 1.0)
    ]
    ok = zeno_3_full > median_3_full and min(zeno_2) >= 0.5
    report(
        "C6 zeno vs median crossover",
        ok,
        f"zeno(3,1.0)={zeno_3_full:.4f} > median(3,1.0)={median_3_full:.4f}; "
        f"min zeno(2 orgs)={min(zeno_2):.4f} (>=0.5)",
    )
    assert zeno_3_full > median_3_full
    assert min(zeno_2) >= 0.5


def test_criterion_7_property_suite(small_config, tmp_path):
    from tests.test_aggregation import (
        naive_fed_avg,
        naive_krum_index,
        naive_median,
        naive_zeno,
        make_validation,
        random_updates,
    )
    from tests.test_fingerprint import brute_force_features
    from tests.test_mlp import analytic_flat_gradients, finite_difference_gradients
    from fedprint.adversary import flip_labels
    from fedprint.aggregation import (
        AggregatorSpec,
        coord_median,
        fed_avg,
        krum_select,
        zeno,
        zeno_rank,
    )
    from fedprint.fingerprint import DeviceModel, TimingGroup, extract_features, FEATURE_NAMES
    from tests.test_adversary import make_org

    start = time.perf_counter()
    rng = np.random.default_rng(20240)

    # gradient check
    arch = MlpArchitecture((13, 5, 4))
    weights = init_weights(arch, 17)
    batch = rng.normal(size=(8, 13))
    labels = rng.integers(0, 4, size=8)
    analytic = analytic_flat_gradients(weights, batch, labels)
    numeric = finite_difference_gradients(weights, batch, labels)
    mask = np.abs(numeric) > 1e-7
    gradient_error = float(
        (np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8))[mask].max()
    )
    assert gradient_error < 1e-4

    # softmax normalization
    probs = forward(init_weights(MlpArchitecture((13, 20, 4)), 3), rng.normal(size=(1000, 13)))
    softmax_error = float(np.abs(probs.sum(axis=1) - 1.0).max())
    assert softmax_error <= 1e-6

    # flatten round trip
    big = init_weights(MlpArchitecture((13, 100, 100, 4)), 5)
    restored = unflatten(big.architecture, flatten(big))
    flatten_exact = all(
        np.array_equal(a, b) for a, b in zip(big.weights, restored.weights)
    ) and all(np.array_equal(a, b) for a, b in zip(big.biases, restored.biases))
    assert flatten_exact

    # aggregators against naive oracles (K <= 5, dim <= 10)
    oracle_error = 0.0
    arch_small = MlpArchitecture((2, 2, 2))  # 10 parameters
    for trial in range(25):
        trial_rng = np.random.default_rng(1000 + trial)
        k = int(trial_rng.integers(4, 6))
        updates = random_updates(trial_rng, k, arch_small)
        vectors = [flatten(u.weights) for u in updates]
        counts = [u.sample_count for u in updates]
        oracle_error = max(
            oracle_error,
            float(np.abs(flatten(fed_avg(updates)) - naive_fed_avg(vectors, counts)).max()),
            float(np.abs(flatten(coord_median(updates)) - naive_median(vectors)).max()),
        )
        best, _ = naive_krum_index(vectors, f=1)
        selected_org, _ = krum_select(updates, f=1)
        assert selected_org == best
        prev = init_weights(arch_small, trial)
        val = make_validation(trial_rng, arch_small, n=16)
        spec = AggregatorSpec(
            kind="zeno", zeno_b=1, zeno_gamma=1.0, server_validation=val
        )
        expected, expected_survivors = naive_zeno(
            vectors, prev, arch_small, *val, 5e-4, 1, 1.0
        )
        _, survivors = zeno_rank(updates, prev, spec)
        assert survivors == expected_survivors
        oracle_error = max(
            oracle_error,
            float(np.abs(flatten(zeno(updates, prev, spec)) - expected).max()),
        )
    assert oracle_error <= 1e-12

    # feature extractor against the brute-force oracle on 1e4 random groups,
    # plus the structural invariants of every extracted vector
    feature_error = 0.0
    for _ in range(10_000):
        n = int(rng.integers(2, 1001))
        samples = rng.uniform(0.5, 100.0, size=n)
        vec = extract_features(TimingGroup(samples, DeviceModel.RPI1, 0))
        oracle = brute_force_features(samples.tolist())
        for name in FEATURE_NAMES:
            got, want = getattr(vec, name), oracle[name]
            feature_error = max(
                feature_error, abs(got - want) / max(abs(want), 1.0)
            )
        assert vec.min <= vec.median <= vec.max
        assert vec.min <= vec.mean <= vec.max
        assert vec.std_dev >= 0
        assert vec.min_decrease <= vec.max_decrease <= 0 <= vec.min_increase
        assert vec.min_increase <= vec.max_increase
    assert feature_error <= 1e-9

    # label flip exclusion at fraction 1.0
    org = make_org(n_train=5000)
    flipped = flip_labels(org, 1.0, seed=3)
    preserved = int((flipped.train.labels == org.train.labels).sum())
    assert preserved == 0

    # full-run determinism: equal seeds -> identical metrics JSON bytes
    corpus = experiment.generate_corpus(small_config)
    experiment.train_federated(corpus, small_config, tmp_path / "d1")
    experiment.train_federated(corpus, small_config, tmp_path / "d2")
    deterministic = (tmp_path / "d1" / "metrics.json").read_bytes() == (
        tmp_path / "d2" / "metrics.json"
    ).read_bytes()
    assert deterministic

    elapsed = time.perf_counter() - start
    ok = elapsed < 120.0
    report(
        "C7 property suite",
        ok,
        f"gradient_err={gradient_error:.2e} softmax_err={softmax_error:.2e} "
        f"flatten_exact={flatten_exact} aggregator_oracle_err={oracle_error:.2e} "
        f"feature_oracle_err={feature_error:.2e} flips_preserved={preserved} "
        f"deterministic={deterministic}, runtime={elapsed:.1f}s (<120s)",
    )
    assert elapsed < 120.0


def test_criterion_8_real_dataset_path(desk_corpus, tmp_path):
    # 100-row fixture in a foreign (published-style) schema
    fixture = tmp_path / "published_fixture.csv"
    header = [
        "Model",
        "Device",
        "Min",
        "Max",
        "Mean",
        "Median",
        "Std Dev",
        "Mode",
        "Sum",
        "Min Decr.",
        "Max Decr.",
        "Decr. sum",
        "Min Incr.",
        "Max Incr.",
        "Incr. sum",
    ]
    label_text = {m: f"RPi {m.value[-1]} Model B" for m in MODELS}
    rows = desk_corpus[:100]
    with open(fixture, "w", encoding="utf-8") as handle:
        handle.write(",".join(header) + "\n")
        for row in rows:
            cells = [label_text[row.model], str(row.device_id)]
            cells += [repr(v) for v in row.features()]
            handle.write(",".join(cells) + "\n")

    config_path = tmp_path / "reader_config.json"
    config_path.write_text(
        json.dumps(
            {
                "reader": {
                    "columns": {
                        "min": "Min",
                        "max": "Max",
                        "mean": "Mean",
                        "median": "Median",
                        "std_dev": "Std Dev",
                        "mode": "Mode",
                        "sum": "Sum",
                        "min_decrease": "Min Decr.",
                        "max_decrease": "Max Decr.",
                        "decrease_sum": "Decr. sum",
                        "min_increase": "Min Incr.",
                        "max_increase": "Max Incr.",
                        "increase_sum": "Incr. sum",
                        "model": "Model",
                        "device_id": "Device",
                    }
                },
                "centralized": {"max_epochs": 10, "patience": 5, "batch_size": 8},
            }
        ),
        encoding="utf-8",
    )
    out_dir = tmp_path / "real_run"
    code = main(
        [
            "train",
            "--dataset",
            str(fixture),
            "--config",
            str(config_path),
            "--mode",
            "centralized",
            "--out-dir",
            str(out_dir),
            "--no-plots",
            "--quiet",
        ]
    )
    metrics_exists = (out_dir / "metrics.json").exists()
    checkpoint_exists = (out_dir / "checkpoint.json").exists()
    ok = code == EXIT_OK and metrics_exists and checkpoint_exists
    report(
        "C8 real-dataset path",
        ok,
        f"exit={code}, metrics={metrics_exists}, checkpoint={checkpoint_exists} "
        "(100-row published-schema fixture, centralized training)",
    )
    assert code == EXIT_OK
    assert metrics_exists and checkpoint_exists
