"""Partially observable semi-Markov models: random sojourn times between decision epochs.

The controller sees observations only, never the sojourn times. The average
cost is a ratio, eta = E0{g} / E0{tau}, and every gradient reduces to the POMDP
machinery applied to the transformed per-stage cost g - tau_bar * eta.
"""
import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from fscgrad import oracle
from fscgrad.actor import GradientEstimate, actor_critic_estimate, fit_critics, gpomdp_estimate
from fscgrad.config import EstimatorTag
from fscgrad.errors import ConfigError, DimensionMismatchError
from fscgrad.model import ChainLevel, build_joint_chain
from fscgrad.simulate import Trajectory, make_sojourn_rng, simulate

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SojournFamily:
    """Sojourn distribution per (x, y, u) with mean table ``mean``.

    deterministic: tau = mean; exponential: tau ~ Exp(mean);
    two_point: tau = mean * (1 -/+ spread) with probability 1/2 each.
    """

    kind: Literal["deterministic", "exponential", "two_point"]
    mean: np.ndarray
    spread: float = 0.5

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        if mean.ndim != 3:
            raise DimensionMismatchError(f"sojourn means must be indexed [x, y, u], got shape {mean.shape}")
        if np.any(mean <= 0.0) or not np.all(np.isfinite(mean)):
            raise ConfigError("mean sojourn times must be positive and finite")
        if self.kind not in ("deterministic", "exponential", "two_point"):
            raise ConfigError(f"unknown sojourn family '{self.kind}'")
        if not 0.0 <= self.spread < 1.0:
            raise ConfigError("two-point spread must lie in [0, 1)")
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)

    def sample(self, x, y, u, rng):
        """Vectorised draws for index arrays x, y, u."""
        m = self.mean[x, y, u]
        if self.kind == "deterministic":
            return m.astype(float)
        if self.kind == "exponential":
            return rng.exponential(m)
        signs = np.where(rng.random(m.shape[0]) < 0.5, -1.0, 1.0)
        return m * (1.0 + signs * self.spread)


@dataclass(frozen=True, eq=False)
class PosmdpModel:
    """A POMDP plus sojourn times. ``cost_mode``: ``lump`` pays c = g per epoch,
    ``rate`` pays c = g * tau / tau_bar; both have E{c | x, y, u} = g."""

    base: object
    sojourn: SojournFamily
    cost_mode: Literal["lump", "rate"] = "lump"

    def __post_init__(self):
        expected = (self.base.n_states, self.base.n_obs, self.base.n_actions)
        if self.sojourn.mean.shape != expected:
            raise DimensionMismatchError(f"sojourn means must have shape {expected}, got {self.sojourn.mean.shape}")
        if self.cost_mode not in ("lump", "rate"):
            raise ConfigError(f"unknown cost mode '{self.cost_mode}'")

    @property
    def mean_sojourn(self):
        return self.sojourn.mean


def make_posmdp(model, family="exponential", mean=1.0, spread=0.5, cost_mode="lump"):
    table = np.broadcast_to(np.asarray(mean, dtype=float), (model.n_states, model.n_obs, model.n_actions))
    return PosmdpModel(base=model, sojourn=SojournFamily(kind=family, mean=table.copy(), spread=spread), cost_mode=cost_mode)


def _stage_tables(pmodel, policy):
    chain = build_joint_chain(pmodel.base, policy, ChainLevel.XYZ)
    pi = oracle.stationary_distribution(chain)
    tau_xyz = np.einsum("zyu,ayu->ayz", policy.mu_table(), pmodel.mean_sojourn).ravel()
    return chain, pi, tau_xyz


def posmdp_average_cost(pmodel, policy):
    """Cost per unit time, (pi . g) / (pi . tau_bar) on the embedded chain."""
    chain, pi, tau_xyz = _stage_tables(pmodel, policy)
    return float(pi @ chain.g) / float(pi @ tau_xyz)


def posmdp_bias(pmodel, policy, eta=None):
    """h with h = g - tau_bar * eta + P h and pi . h = 0, indexed [x, y, z]."""
    chain, pi, tau_xyz = _stage_tables(pmodel, policy)
    if eta is None:
        eta = float(pi @ chain.g) / float(pi @ tau_xyz)
    _, h = oracle.poisson_solution(chain.P, pi, chain.g - tau_xyz * eta)
    return chain.reshape(h)


def posmdp_gradient_exact(pmodel, policy):
    """Gradient of the POMDP with cost g - tau_bar * eta (eta held fixed), over E0{tau}."""
    chain, pi, tau_xyz = _stage_tables(pmodel, policy)
    mean_time = float(pi @ tau_xyz)
    eta = float(pi @ chain.g) / mean_time
    transformed = pmodel.base.cost - pmodel.mean_sojourn * eta
    grad = oracle.gradient_for_cost(pmodel.base, policy, transformed)[0]
    return grad / mean_time


def simulate_semi_markov(pmodel, policy, T, seed, init=None):
    """Embedded path from ``simulate`` plus sojourn times on an independent stream."""
    traj = simulate(pmodel.base, policy, T, seed, init=init)
    tau = pmodel.sojourn.sample(traj.x, traj.y, traj.u, make_sojourn_rng(seed))
    g = traj.g
    if pmodel.cost_mode == "rate":
        g = g * tau / pmodel.mean_sojourn[traj.x, traj.y, traj.u]
    return Trajectory(x=traj.x, y=traj.y, z=traj.z, u=traj.u, g=g, seed=seed, tau=tau)


def epoch_times(view):
    """Decision epochs tau_0 = 0, tau_{n+1} = tau_n + sojourn_n."""
    return np.concatenate([[0.0], np.cumsum(view.sojourn)])


def posmdp_td_estimate(view, policy, tag, beta, lam, critic_cfg):
    """Estimate with per-stage cost g_n - sojourn_n * eta_hat_n, divided by the mean sojourn.

    eta_hat is accumulated cost over accumulated time. With unit sojourns this
    is the POMDP estimate exactly.
    """
    tag = EstimatorTag(tag)
    tau = view.sojourn
    eta_hat = np.cumsum(view.g) / np.cumsum(tau)
    costs = view.g - tau * eta_hat
    if tag is EstimatorTag.GPOMDP:
        est = gpomdp_estimate(view, policy, beta, costs=costs)
    else:
        critics = fit_critics(view, policy, critic_cfg, beta, lam, costs=costs)
        est = actor_critic_estimate(view, policy, *critics, mode=tag, beta=beta, lam=lam)
    scale = float(np.mean(tau))
    return GradientEstimate(value=est.value / scale, tag=tag, T=est.T, beta=beta, lam=lam)
