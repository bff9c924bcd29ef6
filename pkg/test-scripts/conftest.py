import logging
from pathlib import Path

import numpy as np
import pytest

from fscgrad.cassandra import parse_pomdp
from fscgrad.model import PomdpModel
from fscgrad.policy import TieMode, make_direct_fsc

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")

ASSETS = Path(__file__).resolve().parent.parent / "fscgrad" / "assets"
TOY2_PATH = ASSETS / "toy2.pomdp"


def random_theta(policy, rng):
    """A feasible theta well inside the box: every probability at least 0.5 / n."""
    Z, Y, A = policy.n_internal, policy.n_obs, policy.n_actions
    theta = np.empty(policy.n_params)
    probs = 0.5 * rng.dirichlet(np.full(A, 2.0), size=Z * Y) + 0.5 / A
    theta[: policy.n_mu] = probs[:, : A - 1].ravel()
    if policy.tie_mode is TieMode.TIED_MEMORY:
        theta[policy.n_mu] = rng.uniform(0.1, 0.9)
    elif Z > 1:
        zp = 0.5 * rng.dirichlet(np.full(Z, 2.0), size=Z * Y * A) + 0.5 / Z
        theta[policy.n_mu :] = zp[:, : Z - 1].ravel()
    return policy.with_theta(theta)


def random_model(rng, n_states=3, n_obs=2, n_actions=2):
    """Dense random POMDP: every transition and observation has positive probability."""
    S, Y, A = n_states, n_obs, n_actions
    transition = 0.8 * rng.dirichlet(np.ones(S), size=(A, S)) + 0.2 / S
    observation = 0.8 * rng.dirichlet(np.ones(Y), size=(A, S)) + 0.2 / Y
    cost = rng.normal(size=(S, Y, A))
    return PomdpModel(transition=transition, observation=observation, cost=cost)


def two_cycle(costs=(0.0, 2.0)):
    """Deterministic 2-cycle with one observation and one action."""
    return PomdpModel(
        transition=[[[0.0, 1.0], [1.0, 0.0]]],
        observation=[[[1.0], [1.0]]],
        cost=np.asarray(costs, dtype=float).reshape(2, 1, 1),
    )


@pytest.fixture
def toy2():
    return parse_pomdp(TOY2_PATH.read_text())


@pytest.fixture
def toy2_path():
    return TOY2_PATH


@pytest.fixture
def reactive(toy2):
    return random_theta(make_direct_fsc(toy2.n_obs, toy2.n_actions, 1), np.random.default_rng(7))


@pytest.fixture
def tied(toy2):
    return random_theta(
        make_direct_fsc(toy2.n_obs, toy2.n_actions, 2, TieMode.TIED_MEMORY), np.random.default_rng(11)
    )


@pytest.fixture
def free_fsc(toy2):
    return random_theta(make_direct_fsc(toy2.n_obs, toy2.n_actions, 2, TieMode.FREE), np.random.default_rng(13))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
