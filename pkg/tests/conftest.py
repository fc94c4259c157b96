import numpy as np
import pytest

from pinnmpc import netcore
from pinnmpc.netcore import Network, NetworkModel, NetworkTopology, init_weights
from pinnmpc.pinn import SamplingDomain


def small_surrogate(seed=0, hidden=(16, 16)):
    dom = SamplingDomain()
    topo = NetworkTopology(hidden=hidden)
    return NetworkModel(Network(topo, dom.normalizer()), init_weights(topo, seed), dom.t_max)


@pytest.fixture
def tiny_checkpoint(tmp_path):
    path = tmp_path / "tiny.json"
    netcore.save_checkpoint(path, small_surrogate())
    return path
