import numpy as np
import pytest

from aqualoc.waveform import PreambleConfig, generate_preamble


@pytest.fixture(scope="session")
def config():
    return PreambleConfig()


@pytest.fixture(scope="session")
def preamble(config):
    return generate_preamble(config)


def random_positions(rng, n, span=30.0, depth=5.0):
    return np.column_stack([rng.uniform(0, span, n), rng.uniform(0, span, n), rng.uniform(0, depth, n)])
