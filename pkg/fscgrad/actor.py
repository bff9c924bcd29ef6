"""Gradient estimators over hidden views and the projected-gradient training loop.

GPOMDP recursion, with s_t the combined score of step t
(grad log mu(u_t | z_t, y_t) + grad log zeta(z_{t+1} | z_t, y_t, u_t)):

    e_t = beta * e_{t-1} + s_t
    estimate = mean_t (g_t - eta_hat_t) * e_t

The trace includes the current score because g_t is paid at step t.
Actor-critic estimates replace the discounted future cost by critic values
v1(y, z, u) and v2(y, z, u, z'), either from the final critic (B-TD) or from
the coefficients the critic held at step t (OL-TD).
"""
import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from fscgrad import oracle
from fscgrad.config import CriticConfig, EstimatorTag
from fscgrad.critic import (
    FeatureLevel,
    StepSizes,
    level_for,
    lspe_batch,
    minimum_basis,
    online_average,
    run_td,
    visited_cells,
)
from fscgrad.errors import DimensionMismatchError
from fscgrad.simulate import hidden_view, simulate

logger = logging.getLogger(__name__)

FEASIBLE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    value: np.ndarray
    tag: EstimatorTag
    T: int
    beta: float
    lam: Optional[float] = None


def score_rows(view, policy):
    """Per-step action and internal-transition scores, (T-1, k) each."""
    y, z, u = view.y, view.z, view.u
    mu_rows = policy.score_mu_table()[z[:-1], y[:-1], u[:-1]]
    if policy.n_internal == 1:
        return mu_rows, np.zeros_like(mu_rows)
    zeta_rows = policy.score_zeta_table()[z[:-1], y[:-1], u[:-1], z[1:]]
    return mu_rows, zeta_rows


def centered_costs(view, eta_mode="ratio", steps=None):
    return view.g - online_average(view.g, mode=eta_mode, steps=steps)


def gpomdp_estimate(view, policy, beta, costs=None):
    """GPOMDP over T - 1 transitions; ``costs`` defaults to ratio-centred g."""
    if len(view) < 2:
        raise ValueError("GPOMDP needs at least two steps")
    if costs is None:
        costs = centered_costs(view)
    mu_rows, zeta_rows = score_rows(view, policy)
    trace = lfilter([1.0], [1.0, -beta], mu_rows + zeta_rows, axis=0)
    n = trace.shape[0]
    value = (np.asarray(costs[:n])[:, None] * trace).sum(axis=0) / n
    return GradientEstimate(value=value, tag=EstimatorTag.GPOMDP, T=len(view), beta=beta)


def _run_critic(fmap, phi, costs, cfg, beta, lam):
    discount = beta if cfg.mode == "discounted" else 1.0
    if cfg.algorithm == "lspe":
        return lspe_batch(fmap, phi, costs, discount, lam, step=cfg.lspe_step, ridge=cfg.ridge)
    return run_td(fmap, phi, costs, discount, lam, steps=StepSizes(cfg.a, cfg.b, cfg.eta_factor))


def critic_costs(view, cfg, tau=None):
    """Per-stage costs the critics see: raw, ratio/stepwise centred, or g - tau * eta_hat."""
    if not cfg.center and cfg.mode == "discounted" and tau is None:
        return np.asarray(view.g, dtype=float)
    if tau is not None:
        return view.g - tau * online_average(view.g, tau=tau)
    return centered_costs(view, cfg.eta_mode, StepSizes(cfg.a, cfg.b, cfg.eta_factor))


def fit_critics(view, policy, cfg: CriticConfig, beta, lam, costs=None):
    """Train the (y, z, u) critic and, for controllers with memory, the (y, z, u, z') critic.

    Features are the minimum basis restricted to tuples the trajectory visits.
    Returns (critic1, critic2); critic2 is None for reactive policies.
    """
    if costs is None:
        costs = critic_costs(view, cfg)
    level1 = level_for(policy)
    cells1 = oracle_cells(policy, level1)
    fmap1 = minimum_basis(policy, level1, support=visited_cells(view, level1, cells1))
    critic1 = _run_critic(fmap1, fmap1.rows(view), costs, cfg, beta, lam)
    if policy.n_internal == 1:
        return critic1, None
    cells2 = oracle_cells(policy, FeatureLevel.YZUZ)
    fmap2 = minimum_basis(policy, FeatureLevel.YZUZ, support=visited_cells(view, FeatureLevel.YZUZ, cells2))
    critic2 = _run_critic(fmap2, fmap2.rows(view), costs, cfg, beta, lam)
    return critic1, critic2


def oracle_cells(policy, level):
    Y, Z, A = policy.n_obs, policy.n_internal, policy.n_actions
    return {FeatureLevel.YU: (Y, A), FeatureLevel.YZU: (Y, Z, A), FeatureLevel.YZUZ: (Y, Z, A, Z)}[FeatureLevel(level)]


def _critic_values(critic, rows, n, online):
    if online:
        if critic.snapshots is None:
            raise ValueError("OL-TD needs per-step critic snapshots")
        return np.einsum("tk,tk->t", rows[:n], critic.snapshots[:n])
    return rows[:n] @ critic.r


def actor_critic_estimate(view, policy, critic1, critic2=None, mode=EstimatorTag.B_TD, beta=None, lam=None):
    """mean_t [score_mu_t * v1_hat_t + score_zeta_t * v2_hat_t] over T - 1 steps."""
    mode = EstimatorTag(mode)
    if mode is EstimatorTag.GPOMDP:
        raise ValueError("actor_critic_estimate takes B-TD or OL-TD")
    if critic1.feature_map.level is not level_for(policy):
        raise DimensionMismatchError(
            f"first critic is {critic1.feature_map.level.value}, policy needs {level_for(policy).value}"
        )
    if policy.n_internal > 1 and (critic2 is None or critic2.feature_map.level is not FeatureLevel.YZUZ):
        raise DimensionMismatchError("controllers with memory need a YZUZ critic for the internal transitions")
    online = mode is EstimatorTag.OL_TD
    mu_rows, zeta_rows = score_rows(view, policy)
    n = mu_rows.shape[0]
    v1 = _critic_values(critic1, critic1.feature_map.rows(view), n, online)
    value = (mu_rows * v1[:, None]).sum(axis=0)
    if policy.n_internal > 1:
        v2 = _critic_values(critic2, critic2.feature_map.rows(view), n, online)
        value = value + (zeta_rows * v2[:, None]).sum(axis=0)
    return GradientEstimate(value=value / n, tag=mode, T=len(view), beta=beta, lam=lam)


def estimate_gradient(view, policy, tag, beta, lam, critic_cfg, critics=None):
    """One estimate of the given kind; critics are fitted unless passed in."""
    tag = EstimatorTag(tag)
    if tag is EstimatorTag.GPOMDP:
        return gpomdp_estimate(view, policy, beta)
    if critics is None:
        critics = fit_critics(view, policy, critic_cfg, beta, lam)
    return actor_critic_estimate(view, policy, *critics, mode=tag, beta=beta, lam=lam)


# feasible directions


def _shift_for_sum(d, lo, hi, target):
    """nu with sum(clip(d - nu, lo, hi)) == target (the sum is piecewise linear in nu)."""
    if d.size == 0:
        return 0.0
    bps = np.unique(np.concatenate([d - hi, d - lo]))
    bps = bps[np.isfinite(bps)]

    def total(nu):
        return float(np.clip(d - nu, lo, hi).sum())

    if bps.size == 0:
        return (d.sum() - target) / d.size
    vals = np.array([total(b) for b in bps])
    if vals[0] <= target:
        free = int(np.sum(np.isinf(hi)))
        return bps[0] if free == 0 else bps[0] - (target - vals[0]) / free
    if vals[-1] >= target:
        free = int(np.sum(np.isinf(lo)))
        return bps[-1] if free == 0 else bps[-1] + (vals[-1] - target) / free
    j = int(np.argmax(vals <= target))
    span = vals[j - 1] - vals[j]
    return bps[j - 1] + (vals[j - 1] - target) * (bps[j] - bps[j - 1]) / span


def _block_sum_caps(policy):
    r_lo, r_hi = policy.residual_bounds
    return 1.0 - r_hi, 1.0 - r_lo


def project_direction(direction, policy, theta=None, tol=FEASIBLE_TOL):
    """Euclidean projection of ``direction`` onto the tangent cone of the feasible set at theta.

    Active box bounds pin the sign of their coordinate; a block whose residual
    probability sits at a bound pins the sign of the block sum.
    """
    theta = policy.theta if theta is None else np.asarray(theta, dtype=float)
    d = np.asarray(direction, dtype=float)
    lo = np.where(theta <= policy.lower + tol, 0.0, -np.inf)
    hi = np.where(theta >= policy.upper - tol, 0.0, np.inf)
    out = np.clip(d, lo, hi)
    cap_lo, cap_hi = _block_sum_caps(policy)
    for block in policy.residual_blocks():
        s = theta[block].sum()
        part = out[block]
        if s >= cap_hi - tol and part.sum() > 0.0:
            nu = _shift_for_sum(d[block], lo[block], hi[block], 0.0)
        elif s <= cap_lo + tol and part.sum() < 0.0:
            nu = _shift_for_sum(d[block], lo[block], hi[block], 0.0)
        else:
            continue
        out[block] = np.clip(d[block] - nu, lo[block], hi[block])
    return out


def project_parameters(theta, policy):
    """Nearest feasible parameter vector: box bounds plus residual-probability bounds per block."""
    theta = np.asarray(theta, dtype=float)
    out = np.clip(theta, policy.lower, policy.upper)
    cap_lo, cap_hi = _block_sum_caps(policy)
    for block in policy.residual_blocks():
        lo, hi = policy.lower[block], policy.upper[block]
        s = out[block].sum()
        if s > cap_hi:
            nu = _shift_for_sum(theta[block], lo, hi, cap_hi)
        elif s < cap_lo:
            nu = _shift_for_sum(theta[block], lo, hi, cap_lo)
        else:
            continue
        out[block] = np.clip(theta[block] - nu, lo, hi)
    return out


def alignment(est, ref, policy=None, projected=False):
    """Cosine between an estimate and a reference gradient.

    ``projected`` compares the feasible projections of the descent directions
    -est and -ref at the policy's theta. Returns NaN when either vector is zero.
    """
    a = np.asarray(getattr(est, "value", est), dtype=float)
    b = np.asarray(getattr(ref, "value", ref), dtype=float)
    if projected:
        a = project_direction(-a, policy)
        b = project_direction(-b, policy)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        logger.warning("⚠️ Alignment undefined for a zero gradient")
        return float("nan")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# training


def iteration_seed(seed, iteration):
    return [int(seed), int(iteration)]


def train(model, policy, tag, beta, lam, critic_cfg, n_iters, T, step=0.01, seed=0, start_iter=0, with_oracle=True):
    """Projected constant-step descent with a fresh trajectory per iteration.

    Returns (policies, log) where policies[i] is the controller before
    iteration i (the last entry is the final one) and ``log`` has one row per entry.
    """
    history = [policy]
    rows = []
    for i in range(start_iter, start_iter + n_iters):
        started = time.perf_counter()
        traj = simulate(model, policy, T, iteration_seed(seed, i))
        est = estimate_gradient(hidden_view(traj), policy, tag, beta, lam, critic_cfg)
        row = {"iter": i, "eta_oracle": np.nan, "grad_norm": float(np.linalg.norm(est.value)), "alignment": np.nan}
        if with_oracle:
            exact, _, eta, _ = oracle.gradient_for_cost(model, policy)
            row["eta_oracle"] = eta
            row["alignment"] = alignment(est, exact)
        direction = project_direction(-est.value, policy)
        policy = policy.with_theta(project_parameters(policy.theta + step * direction, policy))
        row["wall_time"] = time.perf_counter() - started
        rows.append(row)
        history.append(policy)
        if (i - start_iter) % 10 == 0:
            logger.info(f"iter {i}: eta={row['eta_oracle']:.6f} |grad|={row['grad_norm']:.4g}")
    final = {"iter": start_iter + n_iters, "eta_oracle": np.nan, "grad_norm": np.nan, "alignment": np.nan, "wall_time": 0.0}
    if with_oracle:
        final["eta_oracle"] = oracle.average_cost(model, policy)
    rows.append(final)
    return history, pd.DataFrame(rows, columns=["iter", "eta_oracle", "grad_norm", "alignment", "wall_time"])


def locate_local_minimum(model, policy, step=0.05, max_iters=5000, tol=1e-6):
    """Projected descent on the exact gradient until the projected gradient is below ``tol``."""
    for i in range(max_iters):
        grad = oracle.exact_gradient(model, policy)
        direction = project_direction(-grad, policy)
        if np.linalg.norm(direction) < tol:
            logger.info(f"✅ Projected gradient below {tol:g} after {i} iterations")
            break
        policy = policy.with_theta(project_parameters(policy.theta + step * direction, policy))
    else:
        logger.warning(f"⚠️ Stopped after {max_iters} iterations without reaching tolerance {tol:g}")
    return policy
