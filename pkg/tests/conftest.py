import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from walk_kernel import binary_source, build_config, nearest_neighbour_kernel  # noqa: E402


@pytest.fixture
def nn1():
    """Simple symmetric walk on Z with total jump rate 1"""
    return nearest_neighbour_kernel(1)


@pytest.fixture
def single_source(nn1):
    return build_config(nn1, [binary_source((0,), 1.0)])


@pytest.fixture
def adjacent_pair(nn1):
    return build_config(nn1, [binary_source((0,), 2.0), binary_source((1,), 2.0)])


REFERENCE_CONFIG = {
    "dim": 1,
    "kernel": [{"offset": [1], "rate": 0.5}, {"offset": [-1], "rate": 0.5}],
    "sources": [{"position": [0], "coeffs": [0.0, -1.0, 1.0]}],
    "numerics": {"truncation_radius": 60, "n_max": 10},
    "simulation": {"horizon": 6.0, "replicas": 50, "seed": 7, "bootstrap": 50, "min_survivors": 5},
}


@pytest.fixture
def config_data():
    return json.loads(json.dumps(REFERENCE_CONFIG))


@pytest.fixture
def config_path(tmp_path, config_data):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config_data))
    return path
