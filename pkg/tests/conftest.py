import logging

import pytest

from msdpn.datagen import generate_dataset
from msdpn.nn import NetworkConfig


@pytest.fixture(autouse=True)
def _reset_root_handlers():
    # cli commands attach file/console handlers to the root logger
    yield
    root = logging.getLogger()
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()


@pytest.fixture(scope="session")
def tiny_samples():
    """Four 32×32 synthetic samples with 90-beam scans."""
    return generate_dataset(4, seed=0, height=32, width=32, beams=90, workers=1)


@pytest.fixture
def tiny_network():
    return NetworkConfig(stages=1, width_mult=0.125, csfa_mode="none", input_mode="ref-d", height=32, width=32)
