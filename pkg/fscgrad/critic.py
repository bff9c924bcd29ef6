"""Linear critics over observable tuples: feature maps built from policy scores,
TD(lambda) and LSPE(lambda) in discounted and average-cost form.

Critics read (y, z, u[, z']) tuples only. Costs handed to the batch routines are
already centred by the caller; the single-step TD functions keep their own
running average-cost estimate unless one is supplied.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd

from fscgrad.errors import DimensionMismatchError, FeatureError

logger = logging.getLogger(__name__)

RANK_TOL = 1e-8
DEFAULT_RIDGE = 1e-8


class FeatureLevel(str, Enum):
    YU = "YU"
    YZU = "YZU"
    YZUZ = "YZUZ"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """phi(tuple) = table[tuple]; ``columns`` maps each feature to its theta coordinate."""

    level: FeatureLevel
    table: np.ndarray
    columns: np.ndarray
    n_params: int

    @property
    def k(self):
        return self.table.shape[-1]

    @property
    def cell_shape(self):
        return self.table.shape[:-1]

    def phi(self, *index):
        if len(index) != len(self.cell_shape):
            raise DimensionMismatchError(
                f"{self.level.value} features take {len(self.cell_shape)} observable coordinates, got {len(index)}"
            )
        return self.table[tuple(index)]

    def rows(self, view):
        """Feature vectors along a hidden view, one per tuple the view fully determines."""
        if self.level is FeatureLevel.YU:
            return self.table[view.y, view.u]
        if self.level is FeatureLevel.YZU:
            return self.table[view.y, view.z, view.u]
        return self.table[view.y[:-1], view.z[:-1], view.u[:-1], view.z[1:]]

    def chain_features(self, n_states):
        """Features for every state of the joint chain this level lives on (x first)."""
        cells = self.table
        if self.level is FeatureLevel.YU:
            cells = cells[:, None, :, :]
        stacked = np.broadcast_to(cells[None], (n_states,) + cells.shape)
        return stacked.reshape(-1, self.k)

    def values(self, r):
        return self.table @ np.asarray(r)

    def expand(self, coef):
        """Scatter per-feature coefficients back onto theta coordinates (dropped ones are 0)."""
        out = np.zeros(self.n_params)
        out[self.columns] = coef
        return out

    def check(self, weights, exclude_constant=False):
        """Rank check on the weighted support, and optionally that 1 is not in the span."""
        w = np.ravel(np.broadcast_to(weights, self.cell_shape))
        keep = w > 0.0
        X = self.table.reshape(-1, self.k)[keep] * np.sqrt(w[keep])[:, None]
        sv = np.linalg.svd(X, compute_uv=False)
        if sv.size == 0 or sv.min() <= RANK_TOL:
            raise FeatureError(f"{self.level.value} features are rank deficient (min singular value {sv.min() if sv.size else 0:.3g})")
        if exclude_constant:
            ones = np.sqrt(w[keep])
            resid = ones - X @ np.linalg.lstsq(X, ones, rcond=None)[0]
            if np.linalg.norm(resid) <= RANK_TOL * max(1.0, np.linalg.norm(ones)):
                raise FeatureError(f"{self.level.value} features contain the constant vector")
        return sv


def level_for(policy, second=False):
    if second:
        return FeatureLevel.YZUZ
    return FeatureLevel.YU if policy.is_reactive else FeatureLevel.YZU


def score_cells(policy, level):
    """Score table re-indexed by observable cells: (Y, A, k), (Y, Z, A, k) or (Y, Z, A, Z, k)."""
    level = FeatureLevel(level)
    if level is FeatureLevel.YZUZ:
        return policy.score_zeta_table().transpose(1, 0, 2, 3, 4)
    table = policy.score_mu_table().transpose(1, 0, 2, 3)
    if level is FeatureLevel.YU:
        if not policy.is_reactive:
            raise DimensionMismatchError("YU features need a reactive policy")
        return table[:, 0]
    return table


def visited_cells(view, level, cell_shape):
    mask = np.zeros(cell_shape, dtype=bool)
    level = FeatureLevel(level)
    if level is FeatureLevel.YU:
        mask[view.y, view.u] = True
    elif level is FeatureLevel.YZU:
        mask[view.y, view.z, view.u] = True
    else:
        mask[view.y[:-1], view.z[:-1], view.u[:-1], view.z[1:]] = True
    return mask


def minimum_basis(policy, level, support=None):
    """Score-function features, dropping columns that vanish on ``support``."""
    level = FeatureLevel(level)
    table = score_cells(policy, level)
    if support is None:
        support = np.ones(table.shape[:-1], dtype=bool)
    live = np.any(table[np.asarray(support, dtype=bool)] != 0.0, axis=0)
    columns = np.flatnonzero(live)
    if columns.size == 0:
        raise FeatureError(f"all {level.value} features vanish on the supplied support")
    return FeatureMap(level=level, table=np.ascontiguousarray(table[..., columns]), columns=columns, n_params=policy.n_params)


# step sizes and online averages


@dataclass(frozen=True)
class StepSizes:
    """gamma_t = a / (b + t); the average-cost rate is min(1, eta_factor * gamma_t)."""

    a: float = 1.0
    b: float = 1000.0
    eta_factor: float = 10.0

    def gamma(self, t):
        return self.a / (self.b + t)

    def rho(self, t):
        return np.minimum(1.0, self.eta_factor * self.gamma(t))


def online_average(g, tau=None, mode="ratio", steps=None):
    """Running average-cost estimate eta_hat_t available at step t.

    ``ratio``: accumulated cost over accumulated time through step t. Step t is
    part of its own baseline, so a constant cost centres to zero from
    the first step and no starting guess is needed.
    ``stepwise``: eta <- eta + rho_t (g_t - eta) starting from 0, value before step t.
    """
    g = np.asarray(g, dtype=float)
    if mode == "ratio":
        time = np.arange(1, g.shape[0] + 1) if tau is None else np.cumsum(tau)
        return np.cumsum(g) / time
    if mode != "stepwise":
        raise ValueError(f"unknown average mode '{mode}'")
    if tau is not None:
        raise ValueError("stepwise averaging is defined for unit-time stages only")
    steps = steps or StepSizes()
    out = np.empty_like(g)
    eta = 0.0
    for t, cost in enumerate(g.tolist()):
        out[t] = eta
        eta += float(steps.rho(t)) * (cost - eta)
    return out


# single-step TD


@dataclass(eq=False)
class CriticState:
    r: np.ndarray
    eta_hat: float = 0.0
    trace: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        self.r = np.array(self.r, dtype=float)
        if self.trace is None:
            self.trace = np.zeros_like(self.r)

    @classmethod
    def zeros(cls, k, eta_hat=0.0):
        return cls(r=np.zeros(k), eta_hat=eta_hat)


def _td_step(critic, phi_t, g_t, phi_next, discount, lam, steps, eta_t):
    eta = critic.eta_hat if eta_t is None else eta_t
    r = critic.r
    d = g_t - eta + discount * (phi_next @ r) - phi_t @ r
    critic.trace = discount * lam * critic.trace + phi_t
    critic.r = r + steps.gamma(critic.step) * d * critic.trace
    critic.eta_hat = eta + steps.rho(critic.step) * (g_t - eta) if eta_t is None else eta_t
    critic.step += 1
    return critic


def discounted_td_step(critic, phi_t, g_t, phi_next, beta, lam, steps=None, eta_t=None, center=True):
    """One beta-discounted TD(lambda) update toward Q_beta of the centred cost.

    With ``center`` off the cost is used as is and eta_hat is only tracked.
    """
    steps = steps or StepSizes()
    if not center:
        tracked = critic.eta_hat
        _td_step(critic, phi_t, g_t, phi_next, beta, lam, steps, 0.0)
        critic.eta_hat = tracked + steps.rho(critic.step - 1) * (g_t - tracked)
        return critic
    return _td_step(critic, phi_t, g_t, phi_next, beta, lam, steps, eta_t)


def average_cost_td_step(critic, phi_t, g_t, phi_next, lam, steps=None, eta_t=None):
    steps = steps or StepSizes()
    return _td_step(critic, phi_t, g_t, phi_next, 1.0, lam, steps, eta_t)


# batch critics


@dataclass(frozen=True, eq=False)
class CriticResult:
    """Final coefficients plus the per-step snapshots (snapshots[t] is r before transition t)."""

    feature_map: FeatureMap
    r: np.ndarray
    snapshots: Optional[np.ndarray]
    eta_hat: float
    algorithm: str

    def values(self):
        return self.feature_map.values(self.r)


def _transitions(phi, costs):
    n = phi.shape[0] - 1
    if n < 1:
        raise ValueError("need at least two feature rows to form a transition")
    return phi[:-1], phi[1:], np.asarray(costs[:n], dtype=float)


def run_td(fmap, phi, costs, discount, lam, steps=None, keep_snapshots=True, eta_hat=0.0):
    """Stochastic TD(lambda) over consecutive feature rows with pre-centred costs."""
    steps = steps or StepSizes()
    now, nxt, c = _transitions(phi, costs)
    n = now.shape[0]
    critic = CriticState.zeros(fmap.k)
    snaps = np.empty((n + 1, fmap.k)) if keep_snapshots else None
    for t in range(n):
        if keep_snapshots:
            snaps[t] = critic.r
        _td_step(critic, now[t], c[t], nxt[t], discount, lam, steps, 0.0)
    if keep_snapshots:
        snaps[n] = critic.r
    if not np.all(np.isfinite(critic.r)):
        logger.warning(f"⚠️ TD critic on {fmap.level.value} diverged after {n} steps")
    return CriticResult(feature_map=fmap, r=critic.r, snapshots=snaps, eta_hat=eta_hat, algorithm="td")


def lspe_batch(fmap, phi, costs, discount, lam, step=1.0, ridge=DEFAULT_RIDGE, keep_snapshots=True, eta_hat=0.0):
    """LSPE(lambda): r <- r + step * B^-1 (A r + b) after every transition.

    B = sum phi phi', A = sum e (discount phi_next - phi)', b = sum e c with the
    eligibility e = discount * lam * e + phi. The normal matrix is regularised by
    ``ridge`` per sample.
    """
    now, nxt, c = _transitions(phi, costs)
    n, k = now.shape
    B = np.zeros((k, k))
    A = np.zeros((k, k))
    b = np.zeros(k)
    e = np.zeros(k)
    r = np.zeros(k)
    eye = np.eye(k)
    snaps = np.empty((n + 1, k)) if keep_snapshots else None
    for t in range(n):
        if keep_snapshots:
            snaps[t] = r
        f = now[t]
        e = discount * lam * e + f
        B += np.outer(f, f)
        A += np.outer(e, discount * nxt[t] - f)
        b += e * c[t]
        r = r + step * np.linalg.solve(B + ridge * (t + 1) * eye, A @ r + b)
    if keep_snapshots:
        snaps[n] = r
    if np.linalg.eigvalsh(B / n).min() < ridge:
        logger.warning(f"⚠️ LSPE normal matrix on {fmap.level.value} is singular; solved with ridge {ridge:g}")
    return CriticResult(feature_map=fmap, r=r, snapshots=snaps, eta_hat=eta_hat, algorithm="lspe")


# checkpoints


def critic_frame(result):
    fmap = result.feature_map
    return pd.DataFrame(
        {
            "level": fmap.level.value,
            "k_f": fmap.k,
            "feature": np.arange(fmap.k),
            "theta_index": fmap.columns,
            "r": result.r,
            "eta_hat": result.eta_hat,
        }
    )


def save_critic(result, path, header=None):
    with open(path, "w") as f:
        if header:
            f.write(f"# {header}\n")
        critic_frame(result).to_csv(f, index=False)
    logger.info(f"Saved {result.feature_map.level.value} critic to {path}")


def load_critic(path, policy):
    """Rebuild a critic from its checkpoint; features are recomputed from ``policy``."""
    frame = pd.read_csv(path, comment="#")
    level = FeatureLevel(frame["level"].iloc[0])
    columns = frame["theta_index"].to_numpy(dtype=int)
    table = score_cells(policy, level)[..., columns]
    fmap = FeatureMap(level=level, table=np.ascontiguousarray(table), columns=columns, n_params=policy.n_params)
    return CriticResult(
        feature_map=fmap,
        r=frame["r"].to_numpy(dtype=float),
        snapshots=None,
        eta_hat=float(frame["eta_hat"].iloc[0]),
        algorithm="checkpoint",
    )
