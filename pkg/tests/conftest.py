import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'marepo'))


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run long acceptance runs')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running training / acceptance run')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    import config
    return config.get_config('tiny')


@pytest.fixture
def tiny_spec():
    from simulator import SceneSpec
    return SceneSpec(seed=3, n_map=6, n_query=3, h=12, w=16)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec):
    from simulator import make_dataset
    out = tmp_path / 'scene'
    make_dataset(tiny_spec, str(out))
    return str(out)
