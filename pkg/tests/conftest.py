import numpy as np
import pytest

from fedprint import config as config_mod
from fedprint import experiment


@pytest.fixture(scope="session")
def default_config():
    return config_mod.load_config()


@pytest.fixture(scope="session")
def desk_corpus(default_config):
    """The full desk-scale corpus (8000 rows); built once per session."""
    return experiment.generate_corpus(default_config)


@pytest.fixture(scope="session")
def small_config(default_config):
    """A small, fast variant of the default scenario for pipeline tests."""
    config = config_mod._deep_merge(
        default_config,
        {
            "corpus": {"groups_per_device": 25, "group_size": 200},
            "scenario": {"rounds": 3},
            "centralized": {"max_epochs": 5, "patience": 2},
        },
    )
    return config


@pytest.fixture(scope="session")
def small_corpus(small_config):
    return experiment.generate_corpus(small_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
