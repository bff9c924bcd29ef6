"""Finite-state controllers with a direct (raw probability) parameterisation.

Parameter layout of theta, for Y observations, A actions and Z internal states:

    [0, n_mu)             action probabilities, block (z, y) holds A - 1 entries
                          at (z * Y + y) * (A - 1) + u; the last action is the residual
    [n_mu, k)  FREE       internal transitions, block (z, y, u) holds Z - 1 entries;
                          the last internal state is the residual
    [n_mu]     TIED_MEMORY one scalar p: keep z with probability p, otherwise jump
                          to the internal state numbered like the current observation

A reactive policy is the FREE controller with Z = 1 (no internal parameters).
"""
import bisect
import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from fscgrad.errors import ConfigError, DimensionMismatchError

logger = logging.getLogger(__name__)

PROB_LO = 0.001
PROB_HI = 0.999
DEFAULT_MEMORY = 0.2


class TieMode(str, Enum):
    FREE = "FREE"
    TIED_MEMORY = "TIED_MEMORY"


@dataclass(frozen=True, eq=False)
class FscPolicy:
    n_obs: int
    n_actions: int
    n_internal: int
    tie_mode: TieMode
    theta: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    residual_bounds: Tuple[float, float] = (PROB_LO, PROB_HI)

    def __post_init__(self):
        k = n_parameters(self.n_obs, self.n_actions, self.n_internal, self.tie_mode)
        arrays = {}
        for name in ("theta", "lower", "upper"):
            arr = np.array(getattr(self, name), dtype=float).ravel()
            if arr.shape != (k,):
                raise DimensionMismatchError(f"{name} must have {k} entries, got {arr.shape[0]}")
            arr.setflags(write=False)
            arrays[name] = arr
        if np.any(arrays["lower"] > arrays["upper"]):
            raise ConfigError("lower bounds exceed upper bounds")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "tie_mode", TieMode(self.tie_mode))

    @property
    def n_mu(self):
        return self.n_internal * self.n_obs * (self.n_actions - 1)

    @property
    def n_params(self):
        return self.theta.shape[0]

    @property
    def is_reactive(self):
        return self.n_internal == 1

    @property
    def score_bound(self):
        """Bound on any score coordinate over the feasible set."""
        return 1.0 / min(np.min(self.lower), self.residual_bounds[0])

    def with_theta(self, theta):
        return FscPolicy(
            n_obs=self.n_obs,
            n_actions=self.n_actions,
            n_internal=self.n_internal,
            tie_mode=self.tie_mode,
            theta=theta,
            lower=self.lower,
            upper=self.upper,
            residual_bounds=self.residual_bounds,
        )

    # probability tables

    def mu_table(self):
        """mu[z, y, u] for every (z, y, u)."""
        Z, Y, A = self.n_internal, self.n_obs, self.n_actions
        free = self.theta[: self.n_mu].reshape(Z, Y, A - 1)
        return np.concatenate([free, 1.0 - free.sum(axis=-1, keepdims=True)], axis=-1)

    def zeta_table(self):
        """zeta[z, y, u, z_next] for every tuple."""
        Z, Y, A = self.n_internal, self.n_obs, self.n_actions
        if self.tie_mode is TieMode.TIED_MEMORY:
            p = self.theta[self.n_mu]
            table = np.zeros((Z, Y, A, Z))
            z, y = np.meshgrid(np.arange(Z), np.arange(Y), indexing="ij")
            table[z, y, :, z] += p
            table[z, y, :, y] += 1.0 - p
            return table
        if Z == 1:
            return np.ones((1, Y, A, 1))
        free = self.theta[self.n_mu :].reshape(Z, Y, A, Z - 1)
        return np.concatenate([free, 1.0 - free.sum(axis=-1, keepdims=True)], axis=-1)

    def mu_jacobian(self):
        """d mu[z, y, u] / d theta, shape (Z, Y, A, k)."""
        Z, Y, A = self.n_internal, self.n_obs, self.n_actions
        jac = np.zeros((Z, Y, A, self.n_params))
        for z in range(Z):
            for y in range(Y):
                base = (z * Y + y) * (A - 1)
                cols = np.arange(base, base + A - 1)
                jac[z, y, np.arange(A - 1), cols] = 1.0
                jac[z, y, A - 1, cols] = -1.0
        return jac

    def zeta_jacobian(self):
        """d zeta[z, y, u, z_next] / d theta, shape (Z, Y, A, Z, k)."""
        Z, Y, A = self.n_internal, self.n_obs, self.n_actions
        jac = np.zeros((Z, Y, A, Z, self.n_params))
        if self.tie_mode is TieMode.TIED_MEMORY:
            col = self.n_mu
            for z in range(Z):
                for y in range(Y):
                    jac[z, y, :, z, col] += 1.0
                    jac[z, y, :, y, col] -= 1.0
            return jac
        if Z == 1:
            return jac
        for z in range(Z):
            for y in range(Y):
                for u in range(A):
                    base = self.n_mu + ((z * Y + y) * A + u) * (Z - 1)
                    cols = np.arange(base, base + Z - 1)
                    jac[z, y, u, np.arange(Z - 1), cols] = 1.0
                    jac[z, y, u, Z - 1, cols] = -1.0
        return jac

    def score_mu_table(self):
        return _safe_score(self.mu_jacobian(), self.mu_table())

    def score_zeta_table(self):
        return _safe_score(self.zeta_jacobian(), self.zeta_table())

    # constraints

    def residual_blocks(self) -> List[np.ndarray]:
        """Index sets whose complement probability 1 - sum(theta[block]) is also boxed.

        A single action (or a single internal state) has no free entries and no block;
        its only probability is fixed at one.
        """
        blocks = []
        A, Z = self.n_actions, self.n_internal
        if A > 1:
            blocks.extend(np.arange(b * (A - 1), (b + 1) * (A - 1)) for b in range(Z * self.n_obs))
        if self.tie_mode is TieMode.FREE and Z > 1:
            for b in range(Z * self.n_obs * A):
                start = self.n_mu + b * (Z - 1)
                blocks.append(np.arange(start, start + Z - 1))
        return blocks

    def is_feasible(self, tol=1e-12):
        theta = self.theta
        if np.any(theta < self.lower - tol) or np.any(theta > self.upper + tol):
            return False
        lo, hi = self.residual_bounds
        for block in self.residual_blocks():
            rest = 1.0 - theta[block].sum()
            if rest < lo - tol or rest > hi + tol:
                return False
        return True

    def parameter_labels(self):
        Z, Y, A = self.n_internal, self.n_obs, self.n_actions
        labels = [f"mu[z={z},y={y},u={u}]" for z in range(Z) for y in range(Y) for u in range(A - 1)]
        if self.tie_mode is TieMode.TIED_MEMORY:
            labels.append("memory")
        elif Z > 1:
            labels.extend(
                f"zeta[z={z},y={y},u={u},z'={w}]"
                for z in range(Z)
                for y in range(Y)
                for u in range(A)
                for w in range(Z - 1)
            )
        return labels


def _safe_score(jac, prob):
    # 0/0 counts as 0: structurally impossible outcomes carry no score
    denom = prob[..., None]
    out = np.zeros_like(jac)
    np.divide(jac, denom, out=out, where=denom > 0.0)
    return out


def n_parameters(n_obs, n_actions, n_internal, tie_mode):
    n_mu = n_internal * n_obs * (n_actions - 1)
    if TieMode(tie_mode) is TieMode.TIED_MEMORY:
        return n_mu + 1
    return n_mu + n_internal * n_obs * n_actions * (n_internal - 1)


def uniform_theta(n_obs, n_actions, n_internal, tie_mode, memory=DEFAULT_MEMORY):
    """Equal action probabilities, equal internal transitions (or ``memory`` when tied)."""
    tie_mode = TieMode(tie_mode)
    theta = np.full(n_parameters(n_obs, n_actions, n_internal, tie_mode), 1.0 / n_internal)
    n_mu = n_internal * n_obs * (n_actions - 1)
    theta[:n_mu] = 1.0 / n_actions
    if tie_mode is TieMode.TIED_MEMORY:
        theta[n_mu] = memory
    return theta


def make_direct_fsc(n_obs, n_actions, n_internal=1, tie_mode=TieMode.FREE, theta=None, bounds=(PROB_LO, PROB_HI)):
    """Build a controller with the direct parameterisation and box bounds.

    ``theta`` defaults to the uniform initial policy (memory parameter 0.2 when tied).
    """
    if min(n_obs, n_actions, n_internal) < 1:
        raise ConfigError("n_obs, n_actions and n_internal must all be >= 1")
    tie_mode = TieMode(tie_mode)
    if tie_mode is TieMode.TIED_MEMORY and n_internal != n_obs:
        raise ConfigError(
            f"TIED_MEMORY refreshes the internal state from the observation and needs "
            f"n_internal == n_obs (got {n_internal} and {n_obs})"
        )
    k = n_parameters(n_obs, n_actions, n_internal, tie_mode)
    if theta is None:
        theta = uniform_theta(n_obs, n_actions, n_internal, tie_mode)
    lo, hi = bounds
    return FscPolicy(
        n_obs=n_obs,
        n_actions=n_actions,
        n_internal=n_internal,
        tie_mode=tie_mode,
        theta=theta,
        lower=np.full(k, lo),
        upper=np.full(k, hi),
        residual_bounds=(lo, hi),
    )


def _check_index(value, size, name):
    if not 0 <= value < size:
        raise IndexError(f"{name}={value} out of range [0, {size})")


def mu(policy, z, y, u):
    _check_index(z, policy.n_internal, "z")
    _check_index(y, policy.n_obs, "y")
    _check_index(u, policy.n_actions, "u")
    A = policy.n_actions
    base = (z * policy.n_obs + y) * (A - 1)
    block = policy.theta[base : base + A - 1]
    return float(block[u]) if u < A - 1 else float(1.0 - block.sum())


def zeta(policy, z, y, u, z_next):
    _check_index(z, policy.n_internal, "z")
    _check_index(y, policy.n_obs, "y")
    _check_index(u, policy.n_actions, "u")
    _check_index(z_next, policy.n_internal, "z_next")
    return float(policy.zeta_table()[z, y, u, z_next])


def score_mu(policy, z, y, u):
    """Gradient of log mu_u(z, y) with respect to the full theta."""
    _check_index(z, policy.n_internal, "z")
    _check_index(y, policy.n_obs, "y")
    _check_index(u, policy.n_actions, "u")
    A = policy.n_actions
    base = (z * policy.n_obs + y) * (A - 1)
    score = np.zeros(policy.n_params)
    p = mu(policy, z, y, u)
    if p <= 0.0:
        return score
    if u < A - 1:
        score[base + u] = 1.0 / p
    else:
        score[base : base + A - 1] = -1.0 / p
    return score


def score_zeta(policy, z, y, u, z_next):
    """Gradient of log zeta_{z_next}(z, y, u) with respect to the full theta."""
    _check_index(z_next, policy.n_internal, "z_next")
    return policy.score_zeta_table()[z, y, u, z_next].copy()


def draw(cdf, uniform):
    """Inverse-CDF draw from a cumulative probability row."""
    return min(bisect.bisect_right(cdf, uniform), len(cdf) - 1)


def sample_action(policy, z, y, rng):
    cdf = np.cumsum(policy.mu_table()[z, y]).tolist()
    return draw(cdf, rng.random())


def sample_internal(policy, z, y, u, rng):
    if policy.n_internal == 1:
        return 0
    cdf = np.cumsum(policy.zeta_table()[z, y, u]).tolist()
    return draw(cdf, rng.random())


class PolicyCheckpoint(BaseModel):
    tie_mode: TieMode = Field(..., description="FREE or TIED_MEMORY internal transitions")
    n_obs: int = Field(..., ge=1)
    n_actions: int = Field(..., ge=1)
    n_internal: int = Field(..., ge=1)
    theta: List[float] = Field(..., description="Flat parameter vector")
    lower: List[float] = Field(..., description="Per-coordinate lower bounds")
    upper: List[float] = Field(..., description="Per-coordinate upper bounds")
    residual_bounds: Tuple[float, float] = Field((PROB_LO, PROB_HI), description="Box for residual probabilities")


def policy_to_checkpoint(policy):
    return PolicyCheckpoint(
        tie_mode=policy.tie_mode,
        n_obs=policy.n_obs,
        n_actions=policy.n_actions,
        n_internal=policy.n_internal,
        theta=policy.theta.tolist(),
        lower=policy.lower.tolist(),
        upper=policy.upper.tolist(),
        residual_bounds=policy.residual_bounds,
    )


def policy_from_checkpoint(ckpt):
    if ckpt.tie_mode is TieMode.TIED_MEMORY and ckpt.n_internal != ckpt.n_obs:
        raise ConfigError("TIED_MEMORY checkpoint needs n_internal == n_obs")
    return FscPolicy(
        n_obs=ckpt.n_obs,
        n_actions=ckpt.n_actions,
        n_internal=ckpt.n_internal,
        tie_mode=ckpt.tie_mode,
        theta=ckpt.theta,
        lower=ckpt.lower,
        upper=ckpt.upper,
        residual_bounds=tuple(ckpt.residual_bounds),
    )


def save_policy(policy, path):
    with open(path, "w") as f:
        json.dump(policy_to_checkpoint(policy).model_dump(mode="json"), f, indent=2)
    logger.info(f"Saved policy checkpoint to {path}")


def load_policy(path):
    with open(path, "r") as f:
        try:
            ckpt = PolicyCheckpoint.model_validate_json(f.read())
        except ValidationError as e:
            raise ConfigError(f"invalid policy checkpoint {path}: {e}") from e
    return policy_from_checkpoint(ckpt)
