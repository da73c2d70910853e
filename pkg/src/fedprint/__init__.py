"""Federated device-model identification from execution-time fingerprints.

Library layout:

- :mod:`fedprint.fingerprint` -- synthetic timing generator, the 13
  statistical features, dataset CSV schema.
- :mod:`fedprint.mlp` -- from-scratch MLP (ReLU hidden layers, softmax
  output), Adam, flat-weight access, checkpoints.
- :mod:`fedprint.flcore` -- organization partitioning, the min-max
  normalization handshake, federated round loop, centralized baseline.
- :mod:`fedprint.aggregation` -- FedAvg, coordinate-wise median, Krum, Zeno.
- :mod:`fedprint.adversary` -- label-flipping attack.
- :mod:`fedprint.experiment` / :mod:`fedprint.cli` -- run orchestration,
  attack matrix, artifact files, command line.
- :mod:`fedprint.report` -- figure rendering for run artifacts.
"""

__version__ = "0.1.0"

from .aggregation import (
    AggregatorSpec,
    ClientUpdate,
    coord_median,
    fed_avg,
    krum,
    make_aggregator,
    zeno,
)
from .adversary import AttackConfig, apply_attack, flip_labels
from .fingerprint import (
    DeviceModel,
    FeatureVector,
    ModelProfile,
    TimingGroup,
    build_corpus,
    extract_features,
    generate_timing_group,
    read_dataset,
    write_dataset,
)
from .flcore import (
    CentralizedConfig,
    Organization,
    ScenarioConfig,
    normalization_handshake,
    partition_scenario,
    run_centralized,
    run_federated,
)
from .mlp import (
    AdamState,
    MlpArchitecture,
    ModelWeights,
    evaluate,
    flatten,
    forward,
    init_weights,
    train_epoch,
    unflatten,
)
