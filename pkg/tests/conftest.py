import pytest

from dnssecplus.clock import SimulatedClock
from dnssecplus.testnet.hierarchy import TestnetConfig, default_testnet


@pytest.fixture
def net():
    return default_testnet()


@pytest.fixture
def compressed_net():
    return default_testnet(TestnetConfig.compressed(), SimulatedClock())
