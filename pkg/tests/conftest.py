import pathlib

import numpy as np
import pytest

from dashkv import traces

# Location of tests
TEST_DIR = pathlib.Path(__file__).parent

# Location of test output
TMP_DIR = TEST_DIR / 'tmp'

LOG_FILE = TMP_DIR / 'dashkv.log'

BASE_ARGS = [
    '--log-create=true',
    f'--log-filename={LOG_FILE}',
    '--log-level=DEBUG',
]

# Small enough for the default test run
TINY = traces.SyntheticConfig(
    seed=3,
    n_layers=2,
    n_heads=2,
    d=8,
    seq_len=48,
    n_queries=6,
    n_clusters=4,
)


@pytest.fixture(scope='session', autouse=True)
def _initialize():
    TMP_DIR.mkdir(exist_ok=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='module')
def tiny_traces():
    return traces.by_layer(traces.generate_traces(TINY, workers=1))
