import numpy as np
import pytest
import torch

from cpmoe.data import Edge, Link, TrafficDataset, build_network
from cpmoe.synthetic import ScenarioConfig, generate_synthetic

torch.set_num_threads(1)


def chain_network(n, r_km=0.5):
    links = [Link(i, np.array([100.0 + i, 2.0, 60.0, 7.0]), 116.3 + 0.01 * i, 39.9) for i in range(n)]
    edges = [Edge(i, i + 1, r_km) for i in range(n - 1)]
    return build_network(links, edges)


@pytest.fixture(scope="session")
def small_scenario():
    cfg = ScenarioConfig(n_links=5, topology="chain", days=9, seed=3)
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def small_dataset(small_scenario):
    net, feats = small_scenario
    return TrafficDataset(net, feats, t_p=4, t_f=4, n_days=1, n_weeks=1)


@pytest.fixture
def tiny_params():
    # a model small enough for sub-second fits
    return dict(d_hidden=8, d_embed=4, n_layers=1, n_up=2, n_down=2, n_global=1, top_k=3,
                khop=2, batch_size=8, threads=1)
