import copy

import numpy as np
import pytest

from logoinsert.backend.toy import ToyBackend
from logoinsert.fixtures import make_logo_asset, make_scene, write_relation_dataset


@pytest.fixture(scope="session")
def pretrained_base():
    """Pretrained toy backend (built once, then read from the on-disk cache)."""
    from logoinsert.backend.pretrain import pretrained_toy

    return pretrained_toy()


@pytest.fixture
def base(pretrained_base):
    return copy.deepcopy(pretrained_base)


@pytest.fixture
def fresh():
    return ToyBackend()


@pytest.fixture(scope="session")
def logo():
    return make_logo_asset()


@pytest.fixture(scope="session")
def bright_scenes():
    return [make_scene(64, i, "bright") for i in range(5)]


@pytest.fixture(scope="session")
def relation_manifest(tmp_path_factory):
    return write_relation_dataset(tmp_path_factory.mktemp("relation"), num_classes=20)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, format_line

    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for res in sorted(RESULTS, key=lambda r: r[0]):
            terminalreporter.write_line(format_line(res))
