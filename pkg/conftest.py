"""
Shared fixtures: small seeded markets, a tiny trained simulator, and policy builders.
"""

import numpy as np
import pytest
import torch

from perfrank.core.schemas import HyperParams
from perfrank.dynamics.schemas import Policy, PolicyVariant
from perfrank.simulator.models import RelevanceModel
from perfrank.simulator.services import train_relevance_model
from perfrank.simulator.synthetic import generate_synthetic_market

torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_market():
    """m=12 users, n=40 items, d=6, c=8."""
    return generate_synthetic_market(m=12, n=40, d=6, c=8, popularity_skew=1.0, seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_market):
    state, log = tiny_market
    model, _ = train_relevance_model(log, state.items, state.prefs, epochs=5, lr=1e-2, batch_size=32, seed=3)
    return model


@pytest.fixture
def random_model():
    """Untrained (randomly initialised), frozen d=6 simulator."""
    torch.manual_seed(7)
    return RelevanceModel(6).freeze()


@pytest.fixture
def make_policy():
    def build(variant: str, name: str = None, mmr_beta: float = 0.5, **hyper) -> Policy:
        return Policy(
            name=name or variant,
            variant=PolicyVariant(variant),
            hyper=HyperParams(**hyper),
            mmr_beta=mmr_beta,
        )
    return build
