"""Finite POMDP models and the joint Markov chains a controller induces on them.

Table layout (all numpy float arrays):

    transition[u, x, x_next]   p(x_next | x, u)
    observation[u, x_next, y]  p(y | x_next, u)   (emitted by the destination state)
    cost[x, y, u]              g(x, y, u)

Joint chains enumerate every tuple densely, e.g. the XYZ index of (x, y, z)
is (x * n_obs + y) * n_internal + z. Unreachable tuples stay in the
enumeration; the oracle restricts stationary quantities to the recurrent class.
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from fscgrad.errors import DimensionMismatchError, ModelFormatError, NonStochasticError

logger = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-12
INPUT_TOL = 1e-9


def check_stochastic(table, name, tol=STOCHASTIC_TOL):
    """Raise NonStochasticError unless every row along the last axis is a distribution."""
    table = np.asarray(table, dtype=float)
    if np.any(table < 0.0) or np.any(table > 1.0):
        raise NonStochasticError(f"{name} has entries outside [0, 1]")
    sums = table.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > tol)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise NonStochasticError(f"{name} row {idx} sums to {sums[idx]:.15g}, not 1")


def normalize_rows(table, name, tol=INPUT_TOL):
    """Renormalise rows that miss 1 by at most ``tol``; larger misses are errors."""
    table = np.array(table, dtype=float)
    sums = table.sum(axis=-1, keepdims=True)
    off = np.abs(sums - 1.0)
    if np.any(off > tol):
        bad = tuple(int(i) for i in np.argwhere(off[..., 0] > tol)[0])
        raise NonStochasticError(f"{name} row {bad} sums to {sums[bad][0]:.15g}, not 1")
    fix = off[..., 0] > STOCHASTIC_TOL
    if np.any(fix):
        logger.warning(f"Renormalising {int(fix.sum())} row(s) of {name} (off by <= {tol:g})")
        table[fix] = table[fix] / sums[fix]
    return table


def _default_names(n):
    return tuple(str(i) for i in range(n))


@dataclass(frozen=True, eq=False)
class PomdpModel:
    """A finite POMDP with costs (rewards are negated when a model is loaded)."""

    transition: np.ndarray
    observation: np.ndarray
    cost: np.ndarray
    initial_dist: Optional[np.ndarray] = None
    state_names: Tuple[str, ...] = ()
    obs_names: Tuple[str, ...] = ()
    action_names: Tuple[str, ...] = ()
    discount: float = 1.0

    def __post_init__(self):
        transition = np.array(self.transition, dtype=float)
        observation = np.array(self.observation, dtype=float)
        cost = np.array(self.cost, dtype=float)
        if transition.ndim != 3 or transition.shape[1] != transition.shape[2]:
            raise DimensionMismatchError(f"transition must be (A, S, S), got {transition.shape}")
        n_actions, n_states, _ = transition.shape
        if observation.ndim != 3 or observation.shape[:2] != (n_actions, n_states):
            raise DimensionMismatchError(
                f"observation must be ({n_actions}, {n_states}, Y), got {observation.shape}"
            )
        n_obs = observation.shape[2]
        if cost.shape != (n_states, n_obs, n_actions):
            raise DimensionMismatchError(
                f"cost must be ({n_states}, {n_obs}, {n_actions}), got {cost.shape}"
            )
        check_stochastic(transition, "transition")
        check_stochastic(observation, "observation")
        if not np.all(np.isfinite(cost)):
            raise ModelFormatError("cost table has non-finite entries")

        initial = None
        if self.initial_dist is not None:
            initial = np.array(self.initial_dist, dtype=float)
            if initial.shape != (n_states,):
                raise DimensionMismatchError(f"initial_dist must have {n_states} entries")
            check_stochastic(initial, "initial_dist")
            initial.setflags(write=False)

        for arr in (transition, observation, cost):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "observation", observation)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "initial_dist", initial)
        object.__setattr__(self, "state_names", tuple(self.state_names) or _default_names(n_states))
        object.__setattr__(self, "obs_names", tuple(self.obs_names) or _default_names(n_obs))
        object.__setattr__(self, "action_names", tuple(self.action_names) or _default_names(n_actions))

    @property
    def n_states(self):
        return self.transition.shape[1]

    @property
    def n_obs(self):
        return self.observation.shape[2]

    @property
    def n_actions(self):
        return self.transition.shape[0]

    def start_distribution(self):
        if self.initial_dist is None:
            return np.full(self.n_states, 1.0 / self.n_states)
        return self.initial_dist

    def emission_kernel(self):
        """TO[u, x, x_next, y_next] = p(x_next | x, u) * p(y_next | x_next, u)."""
        return self.transition[:, :, :, None] * self.observation[:, None, :, :]

    def with_cost(self, cost):
        """Same dynamics, different per-stage cost table."""
        return PomdpModel(
            transition=self.transition,
            observation=self.observation,
            cost=cost,
            initial_dist=self.initial_dist,
            state_names=self.state_names,
            obs_names=self.obs_names,
            action_names=self.action_names,
            discount=self.discount,
        )


class PomdpDocument(BaseModel):
    """Structured (JSON) model format, field for field the same tables as PomdpModel."""

    states: List[str] = Field(..., min_length=1, description="State names")
    observations: List[str] = Field(..., min_length=1, description="Observation names")
    actions: List[str] = Field(..., min_length=1, description="Action names")
    transition: List[List[List[float]]] = Field(..., description="p(x'|x,u) indexed [u][x][x']")
    observation: List[List[List[float]]] = Field(..., description="p(y|x',u) indexed [u][x'][y]")
    cost: List[List[List[float]]] = Field(..., description="g(x,y,u) indexed [x][y][u]")
    values: Literal["cost", "reward"] = Field("cost", description="Sign convention of `cost`")
    initial_dist: Optional[List[float]] = Field(None, description="Distribution of the first state")
    discount: float = Field(1.0, ge=0.0, le=1.0)


def load_model_json(text):
    try:
        doc = PomdpDocument.model_validate_json(text)
    except ValidationError as e:
        raise ModelFormatError(f"invalid JSON model: {e}") from e
    sign = -1.0 if doc.values == "reward" else 1.0
    return PomdpModel(
        transition=normalize_rows(doc.transition, "transition"),
        observation=normalize_rows(doc.observation, "observation"),
        cost=sign * np.asarray(doc.cost, dtype=float),
        initial_dist=None if doc.initial_dist is None else normalize_rows([doc.initial_dist], "initial_dist")[0],
        state_names=doc.states,
        obs_names=doc.observations,
        action_names=doc.actions,
        discount=doc.discount,
    )


def dump_model_json(model):
    doc = PomdpDocument(
        states=list(model.state_names),
        observations=list(model.obs_names),
        actions=list(model.action_names),
        transition=model.transition.tolist(),
        observation=model.observation.tolist(),
        cost=model.cost.tolist(),
        values="cost",
        initial_dist=None if model.initial_dist is None else model.initial_dist.tolist(),
        discount=model.discount,
    )
    return json.dumps(doc.model_dump(), indent=2)


def load_model(path):
    """Load a model from a `.pomdp` or `.json` file."""
    from fscgrad.cassandra import parse_pomdp

    with open(path, "r") as f:
        text = f.read()
    if str(path).endswith(".json"):
        return load_model_json(text)
    return parse_pomdp(text)


class ChainLevel(str, Enum):
    XYZ = "XYZ"
    XYZU = "XYZU"
    XYZUZ = "XYZUZ"


@dataclass(frozen=True, eq=False)
class JointChain:
    """A finite Markov chain over enumerated tuples, with expected per-stage costs.

    ``next_xyz[i, j]`` is the probability that the (x, y, z) component after
    leaving state i is the XYZ-enumerated tuple j. For generic chains built
    from a bare matrix it is P itself.
    """

    level: Optional[ChainLevel]
    dims: Tuple[int, ...]
    P: np.ndarray
    g: np.ndarray
    next_xyz: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        n = int(np.prod(self.dims))
        if self.P.shape != (n, n) or self.g.shape != (n,):
            raise DimensionMismatchError(f"chain of size {n} got P {self.P.shape}, g {self.g.shape}")
        sums = self.P.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > STOCHASTIC_TOL:
            raise NonStochasticError(f"joint chain rows deviate from 1 by {np.max(np.abs(sums - 1.0)):.3g}")
        if self.next_xyz is None:
            object.__setattr__(self, "next_xyz", self.P)

    @classmethod
    def from_matrix(cls, P, g=None):
        P = np.asarray(P, dtype=float)
        g = np.zeros(P.shape[0]) if g is None else np.asarray(g, dtype=float)
        return cls(level=None, dims=(P.shape[0],), P=P, g=g)

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def states(self):
        """Enumerated tuples, one row per joint state, in index order."""
        return np.indices(self.dims).reshape(len(self.dims), -1).T

    def reshape(self, vector):
        return np.asarray(vector).reshape(self.dims)


def _check_spaces(model, policy):
    if policy.n_obs != model.n_obs or policy.n_actions != model.n_actions:
        raise DimensionMismatchError(
            f"policy is for {policy.n_obs} observations/{policy.n_actions} actions, "
            f"model has {model.n_obs}/{model.n_actions}"
        )


def build_joint_chain(model, policy, level=ChainLevel.XYZ):
    """Flatten model + controller into a JointChain at the requested level."""
    _check_spaces(model, policy)
    level = ChainLevel(level)
    mu = policy.mu_table()
    zeta = policy.zeta_table()
    to = model.emission_kernel()
    S, Y, Z, A = model.n_states, model.n_obs, policy.n_internal, model.n_actions

    if level is ChainLevel.XYZ:
        P = np.einsum("zyu,zyuw,uabc->ayzbcw", mu, zeta, to).reshape(S * Y * Z, S * Y * Z)
        g = np.einsum("zyu,ayu->ayz", mu, model.cost).ravel()
        return JointChain(level=level, dims=(S, Y, Z), P=P, g=g)

    if level is ChainLevel.XYZU:
        kernel = np.einsum("zyuw,uabc->ayzubcw", zeta, to)
        P = np.einsum("ayzubcw,wcv->ayzubcwv", kernel, mu)
        n = S * Y * Z * A
        g = np.broadcast_to(model.cost[:, :, None, :], (S, Y, Z, A)).ravel()
        return JointChain(
            level=level,
            dims=(S, Y, Z, A),
            P=P.reshape(n, n),
            g=g.copy(),
            next_xyz=kernel.reshape(n, S * Y * Z),
        )

    # XYZUZ: the internal state chosen at t is carried as the fifth coordinate.
    to_axu = to.transpose(1, 0, 2, 3)
    step = np.einsum("aubc,wcv,wcvq->auwbcvq", to_axu, mu, zeta)
    P = np.zeros((S, Y, Z, A, Z, S, Y, Z, A, Z))
    kernel = np.zeros((S, Y, Z, A, Z, S, Y, Z))
    for w in range(Z):
        P[:, :, :, :, w, :, :, w, :, :] = step[:, None, None, :, w]
        kernel[:, :, :, :, w, :, :, w] = to_axu[:, None, None, :, :, :]
    n = S * Y * Z * A * Z
    g = np.broadcast_to(model.cost[:, :, None, :, None], (S, Y, Z, A, Z)).ravel()
    return JointChain(
        level=level,
        dims=(S, Y, Z, A, Z),
        P=P.reshape(n, n),
        g=g.copy(),
        next_xyz=kernel.reshape(n, S * Y * Z),
    )
