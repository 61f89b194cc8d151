import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from fsiad.core import TrainConfig
from fsiad.dataio import Manifest, PairedPool, generate_dataset

torch.set_num_threads(1)
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """8 subjects x 4 attribute draws at 32px."""
    out = tmp_path_factory.mktemp("tiny_data")
    manifest = generate_dataset(3, 8, 4, 32, out)
    return manifest


@pytest.fixture(scope="session")
def tiny_pool(tiny_data):
    return PairedPool.from_manifest(tiny_data, ("train",))


@pytest.fixture
def tiny_cfg():
    return TrainConfig(resolution=32, batch_size=4, width=0.125, n_subjects=8, attrs_per_subject=4,
                       iterations=4, pretrain_epochs=1, hfr_steps=4, hfr_batch_size=4, n_aug=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    from toy import toy_run
    return toy_run(tmp_path_factory)


def pytest_collection_modifyitems(config, items):
    # anything touching the default toy run trains for tens of minutes
    for item in items:
        if "toy" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
