"""Seeded sample paths of (X_t, Y_t, Z_t, U_t, g_t).

Generator: numpy PCG64 seeded through ``SeedSequence(seed)``, one stream per
trajectory. Every step consumes one row of four uniforms (action, internal
state, next state, next observation); the start consumes two (x0, y0).
Semi-Markov sojourn times come from ``SeedSequence(seed).spawn(1)[0]``, so the
embedded path is the same with or without them.
"""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from fscgrad.model import _check_spaces
from fscgrad.policy import draw

logger = logging.getLogger(__name__)


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def make_sojourn_rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed).spawn(1)[0]))


class Step(NamedTuple):
    y: int
    z: int
    u: int
    g: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    u: np.ndarray
    g: np.ndarray
    seed: Optional[int] = None
    tau: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("x", "y", "z", "u", "g", "tau"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    def __len__(self):
        return self.y.shape[0]


@dataclass(frozen=True, eq=False)
class HiddenView:
    """A trajectory without the hidden state, the only input estimators accept."""

    y: np.ndarray
    z: np.ndarray
    u: np.ndarray
    g: np.ndarray
    tau: Optional[np.ndarray] = None

    def __len__(self):
        return self.y.shape[0]

    def __getitem__(self, t):
        return Step(int(self.y[t]), int(self.z[t]), int(self.u[t]), float(self.g[t]))

    def __iter__(self):
        return (self[t] for t in range(len(self)))

    @property
    def sojourn(self):
        return np.ones(len(self)) if self.tau is None else self.tau


def hidden_view(traj):
    return HiddenView(y=traj.y, z=traj.z, u=traj.u, g=traj.g, tau=traj.tau)


def _cdf_rows(table):
    return np.cumsum(table, axis=-1).tolist()


def simulate(model, policy, T, seed, init=None):
    """Simulate T steps.

    ``init`` may be a state index or a distribution over states; by default
    the model's initial distribution (uniform when absent) is used. The first
    internal state is 0 and the first observation is drawn from the average
    over actions of the observation kernel at x0.
    """
    _check_spaces(model, policy)
    if T < 1:
        raise ValueError("trajectory length must be >= 1")
    rng = make_rng(seed)

    if init is None:
        start = model.start_distribution()
    elif np.ndim(init) == 0:
        start = np.zeros(model.n_states)
        start[int(init)] = 1.0
    else:
        start = np.asarray(init, dtype=float)

    mu_cdf = _cdf_rows(policy.mu_table())
    zeta_cdf = _cdf_rows(policy.zeta_table())
    trans_cdf = _cdf_rows(model.transition)
    obs_cdf = _cdf_rows(model.observation)
    first_obs = np.cumsum(model.observation.mean(axis=0), axis=-1).tolist()
    cost = model.cost.tolist()
    memoryless = policy.n_internal == 1

    x0_draw, y0_draw = rng.random(2)
    uniforms = rng.random((T, 4)).tolist()

    xs = np.empty(T, dtype=np.int64)
    ys = np.empty(T, dtype=np.int64)
    zs = np.empty(T, dtype=np.int64)
    us = np.empty(T, dtype=np.int64)
    gs = np.empty(T)

    x = draw(np.cumsum(start).tolist(), x0_draw)
    y = draw(first_obs[x], y0_draw)
    z = 0
    for t in range(T):
        ua, uz, ux, uy = uniforms[t]
        u = draw(mu_cdf[z][y], ua)
        xs[t], ys[t], zs[t], us[t] = x, y, z, u
        gs[t] = cost[x][y][u]
        z = 0 if memoryless else draw(zeta_cdf[z][y][u], uz)
        x = draw(trans_cdf[u][x], ux)
        y = draw(obs_cdf[u][x], uy)

    return Trajectory(x=xs, y=ys, z=zs, u=us, g=gs, seed=seed)


def trajectory_frame(traj):
    frame = pd.DataFrame({"t": np.arange(len(traj)), "x": traj.x, "y": traj.y, "z": traj.z, "u": traj.u, "g": traj.g})
    if traj.tau is not None:
        frame["tau"] = traj.tau
    return frame


def save_trajectory(traj, path, header=None):
    with open(path, "w") as f:
        if header:
            f.write(f"# {header}\n")
        trajectory_frame(traj).to_csv(f, index=False)
    logger.info(f"Wrote {len(traj)}-step trajectory to {path}")


def load_trajectory(path):
    frame = pd.read_csv(path, comment="#")
    tau = frame["tau"].to_numpy() if "tau" in frame.columns else None
    return Trajectory(
        x=frame["x"].to_numpy(),
        y=frame["y"].to_numpy(),
        z=frame["z"].to_numpy(),
        u=frame["u"].to_numpy(),
        g=frame["g"].to_numpy(dtype=float),
        tau=tau,
    )
