"""Exact model-based quantities: stationary distributions, average cost, bias,
Q-functions, discounted values, conditional means and gradients.

Everything here is a dense linear solve. Arrays indexed by joint tuples keep the
chain layout, e.g. pi[x, y, z], Q[x, y, z, u], and values that only depend on
observable coordinates drop the leading x axis.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.sparse.csgraph import connected_components

from fscgrad.errors import AssumptionViolation, ConfigError
from fscgrad.model import ChainLevel, JointChain, build_joint_chain

logger = logging.getLogger(__name__)


# chains


def recurrent_classes(P):
    """Closed communicating classes of a row-stochastic matrix, as index arrays."""
    n_comp, labels = connected_components(P > 0.0, directed=True, connection="strong")
    rows, cols = np.nonzero(P > 0.0)
    leaking = np.zeros(n_comp, dtype=bool)
    leaking[labels[rows][labels[rows] != labels[cols]]] = True
    return [np.flatnonzero(labels == c) for c in range(n_comp) if not leaking[c]]


def stationary_distribution(chain):
    """Unique stationary distribution; zero outside the recurrent class."""
    P = chain.P
    classes = recurrent_classes(P)
    if len(classes) != 1:
        named = [[tuple(int(v) for v in chain.states[i]) for i in cls[:5]] for cls in classes]
        raise AssumptionViolation(
            f"chain has {len(classes)} recurrent classes (not unichain); first members: {named}",
            classes=[cls.tolist() for cls in classes],
        )
    rec = classes[0]
    sub = P[np.ix_(rec, rec)]
    m = rec.size
    lhs = sub.T - np.eye(m)
    lhs[-1, :] = 1.0
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    pi = np.zeros(chain.n)
    pi[rec] = np.linalg.solve(lhs, rhs)
    return np.clip(pi, 0.0, None)


def poisson_solution(P, pi, cost):
    """h with (I - P) h = cost - (pi . cost) and pi . h = 0."""
    n = P.shape[0]
    eta = float(pi @ cost)
    h = np.linalg.solve(np.eye(n) - P + np.outer(np.ones(n), pi), cost - eta)
    return eta, h


def solve_average_cost(chain, pi=None):
    """Average cost eta = pi . g and the bias h normalised by pi . h = 0."""
    if pi is None:
        pi = stationary_distribution(chain)
    return poisson_solution(chain.P, pi, chain.g)


def q_function(chain_xyzu, h):
    """Q(x, y, z, u) = g(x, y, u) + E[h(X1, Y1, Z1) | x, y, z, u], h from the XYZ chain."""
    return chain_xyzu.g + chain_xyzu.next_xyz @ np.ravel(h)


def discounted_values(chain_xyz, chain_xyzu, beta):
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"discount beta must lie in [0, 1), got {beta}")
    J = np.linalg.solve(np.eye(chain_xyz.n) - beta * chain_xyz.P, chain_xyz.g)
    Q = chain_xyzu.g + beta * (chain_xyzu.next_xyz @ J)
    return J, Q


def extend_stationary(pi_xyz, policy, level):
    """Stationary distribution of the XYZU or XYZUZ chain from the XYZ one."""
    pi_xyz = np.asarray(pi_xyz)
    pi_u = np.einsum("ayz,zyu->ayzu", pi_xyz, policy.mu_table())
    if ChainLevel(level) is ChainLevel.XYZU:
        return pi_u
    return np.einsum("ayzu,zyuw->ayzuw", pi_u, policy.zeta_table())


def conditional_means(pi, values, dims=None):
    """E0{values | observable coordinates}: average out the leading x axis.

    Returns (means, mass); cells with zero stationary mass are NaN in ``means``.
    """
    pi = np.asarray(pi, dtype=float)
    values = np.asarray(values, dtype=float)
    if dims is not None:
        pi = pi.reshape(dims)
        values = values.reshape(dims)
    mass = pi.sum(axis=0)
    weighted = (pi * values).sum(axis=0)
    means = np.full(mass.shape, np.nan)
    np.divide(weighted, mass, out=means, where=mass > 0.0)
    return means, mass


# gradients


def _continuation(model, values):
    """C[x, u, z'] = E[values(X1, Y1, z') | x, u] for values over (x, y, z)."""
    return np.einsum("uabc,bcw->auw", model.emission_kernel(), values)


def _xyz_solution(model, policy):
    chain = build_joint_chain(model, policy, ChainLevel.XYZ)
    pi = stationary_distribution(chain)
    eta, h = solve_average_cost(chain, pi)
    return chain, chain.reshape(pi), eta, chain.reshape(h)


def q_table(model, policy, h, beta=1.0):
    """Q[x, y, z, u] = g + beta * E[h(next)], without building the XYZU chain."""
    cont = _continuation(model, h)
    return model.cost[:, :, None, :] + beta * np.einsum("zyuw,auw->ayzu", policy.zeta_table(), cont)


def bias_extended(model, policy, eta, h):
    """Bias of the XYZUZ chain: g(x, y, u) - eta + E[h(X1, Y1, z') | x, u].

    Agrees with a direct Poisson solve on the XYZUZ chain (same normalisation).
    """
    S, Y, Z, A = model.n_states, model.n_obs, policy.n_internal, model.n_actions
    cont = _continuation(model, h)
    out = model.cost[:, :, None, :, None] - eta + cont[:, None, None, :, :]
    return np.broadcast_to(out, (S, Y, Z, A, Z)).copy()


def _assemble(pi, policy, first, second):
    """sum pi dmu first + sum pi mu dzeta second, with first[x,y,z,u], second[x,u,z']."""
    grad = np.einsum("ayz,zyuk,ayzu->k", pi, policy.mu_jacobian(), first)
    if policy.n_internal > 1:
        grad = grad + np.einsum(
            "ayz,zyu,zyuwk,auw->k", pi, policy.mu_table(), policy.zeta_jacobian(), second
        )
    return grad


def gradient_for_cost(model, policy, cost=None):
    """Exact gradient of the average of ``cost`` (defaults to the model's) with respect to theta.

    Returns (gradient, pi[x,y,z], eta, h[x,y,z]).
    """
    if cost is not None:
        model = model.with_cost(cost)
    _, pi, eta, h = _xyz_solution(model, policy)
    cont = _continuation(model, h)
    Q = q_table(model, policy, h)
    return _assemble(pi, policy, Q, cont), pi, eta, h


def exact_gradient(model, policy):
    """Two-term gradient: E{grad log mu * Q} + E{grad log zeta * E[h(next) | x, u, z']}."""
    return gradient_for_cost(model, policy)[0]


def average_cost(model, policy):
    return _xyz_solution(model, policy)[2]


def exact_beta_gradient(model, policy, beta):
    """The beta-discounted approximate gradient.

    Reactive policies: E0{grad log mu * Q_beta}. Controllers with memory add
    E0{grad log zeta * beta * J_beta(next)}, the quantity GPOMDP's combined
    eligibility trace estimates.
    """
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"discount beta must lie in [0, 1), got {beta}")
    chain, pi, _, _ = _xyz_solution(model, policy)
    J = chain.reshape(np.linalg.solve(np.eye(chain.n) - beta * chain.P, chain.g))
    Q_beta = q_table(model, policy, J, beta)
    return _assemble(pi, policy, Q_beta, beta * _continuation(model, J))


def conditional_mean_gradient(model, policy, beta=None):
    """The same gradients assembled from observable conditional means v1 and v2.

    ``beta=None`` gives the average-cost gradient, otherwise the beta-discounted one.
    """
    chain, pi, eta, h = _xyz_solution(model, policy)
    pi_u = extend_stationary(pi, policy, ChainLevel.XYZU)
    pi_uz = extend_stationary(pi, policy, ChainLevel.XYZUZ)
    if beta is None:
        Q = q_table(model, policy, h)
        h_ext = bias_extended(model, policy, eta, h)
    else:
        J = chain.reshape(np.linalg.solve(np.eye(chain.n) - beta * chain.P, chain.g))
        Q = q_table(model, policy, J, beta)
        h_ext = model.cost[:, :, None, :, None] + beta * _continuation(model, J)[:, None, None, :, :]
    v1, mass1 = conditional_means(pi_u, Q)
    v2, mass2 = conditional_means(pi_uz, np.broadcast_to(h_ext, pi_uz.shape))
    v1 = np.nan_to_num(v1)
    v2 = np.nan_to_num(v2)
    grad = np.einsum("yzu,zyuk,yzu->k", mass1, policy.score_mu_table(), v1)
    if policy.n_internal > 1:
        grad = grad + np.einsum("yzuw,zyuwk,yzuw->k", mass2, policy.score_zeta_table(), v2)
    return grad


def finite_difference_gradient(model, policy, step=1e-5, objective=None):
    """Central differences of ``objective(model, policy)`` (average cost by default)."""
    objective = objective or average_cost
    theta = policy.theta
    grad = np.zeros(theta.shape[0])
    for i in range(theta.shape[0]):
        up, down = theta.copy(), theta.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (objective(model, policy.with_theta(up)) - objective(model, policy.with_theta(down))) / (2 * step)
    return grad


# critics


def weighted_projection(values, weights, features, shift=False):
    """Weighted least-squares fit of ``values`` on the columns of ``features``.

    Rows with zero weight are ignored. Returns (r, c) where c is the fitted
    constant (0 when ``shift`` is off).
    """
    values = np.ravel(values)
    weights = np.ravel(weights)
    features = np.asarray(features).reshape(values.shape[0], -1)
    keep = weights > 0.0
    X = features[keep]
    if shift:
        X = np.column_stack([X, np.ones(X.shape[0])])
    sw = np.sqrt(weights[keep])
    coef = np.linalg.lstsq(X * sw[:, None], values[keep] * sw, rcond=None)[0]
    if shift:
        return coef[:-1], float(coef[-1])
    return coef, 0.0


def weighted_sq_distance(a, b, weights):
    weights = np.ravel(weights)
    keep = weights > 0.0
    diff = np.ravel(a)[keep] - np.ravel(b)[keep]
    return float(np.sum(weights[keep] * diff**2))


def pythagorean_decomposition(pi, values, features, r):
    """E0{(Q - phi'r)^2} split as E0{Q^2 - v^2} + E0{(v - phi'r)^2}.

    ``pi`` and ``values`` are indexed by the full chain tuple with x first,
    ``features`` by the observable part with a trailing feature axis.
    Returns (total, conditional_variance, approximation_error).
    """
    pi = np.asarray(pi, dtype=float)
    values = np.asarray(values, dtype=float).reshape(pi.shape)
    fitted = np.asarray(features) @ np.asarray(r)
    total = float(np.sum(pi * (values - fitted[None]) ** 2))
    v, mass = conditional_means(pi, values)
    ok = mass > 0.0
    variance = float(np.sum(pi * values**2) - np.sum(mass[ok] * v[ok] ** 2))
    approx = float(np.sum(mass[ok] * (v[ok] - fitted[ok]) ** 2))
    return total, variance, approx


def td_fixed_point(chain, pi, features, lam, beta=None, cost=None, center=True):
    """Limit of linear TD(lambda) on ``chain`` with per-state ``features`` (n, k).

    ``beta=None`` is the average-cost critic (costs centred by the exact eta,
    requires lam < 1). Otherwise the beta-discounted critic, centred when
    ``center`` is set.
    """
    P = chain.P
    n = P.shape[0]
    cost = chain.g if cost is None else np.ravel(cost)
    F = np.asarray(features, dtype=float).reshape(n, -1)
    eta = float(pi @ cost)
    DF = F * pi[:, None]
    eye = np.eye(n)
    if beta is None:
        if lam >= 1.0:
            raise ConfigError("average-cost TD needs lambda < 1")
        M = np.linalg.inv(eye - lam * P)
        A = DF.T @ ((1.0 - lam) * P @ M - eye) @ F
        b = DF.T @ M @ (cost - eta)
    else:
        M = np.linalg.inv(eye - beta * lam * P)
        A = DF.T @ (beta * (1.0 - lam) * P @ M - eye) @ F
        b = DF.T @ M @ (cost - eta if center else cost)
    return np.linalg.solve(A, -b)


def mixing_factor(chain, pi, lam):
    """Contraction factor of the TD(lambda) operator (1 - lam) P (I - lam P)^-1
    in the pi-weighted norm, on functions orthogonal to constants."""
    support = np.flatnonzero(pi > 0.0)
    P = chain.P[np.ix_(support, support)]
    m = support.size
    M = (1.0 - lam) * P @ np.linalg.inv(np.eye(m) - lam * P)
    q = np.sqrt(pi[support])
    B = (q[:, None] * M) / q[None, :]
    perp = np.eye(m) - np.outer(q, q)
    return float(np.linalg.norm(B @ perp, 2))


# bundled solution


@dataclass(frozen=True, eq=False)
class ExactSolution:
    dims: tuple
    pi: np.ndarray
    eta: float
    h: np.ndarray
    Q: np.ndarray
    v1: np.ndarray
    mass1: np.ndarray
    v2: np.ndarray
    mass2: np.ndarray
    gradient: np.ndarray
    labels: tuple
    beta: Optional[float] = None
    J_beta: Optional[np.ndarray] = None
    Q_beta: Optional[np.ndarray] = None
    v1_beta: Optional[np.ndarray] = None
    beta_gradient: Optional[np.ndarray] = None

    @property
    def v(self):
        """Reactive conditional mean v(y, u)."""
        if self.dims[2] != 1:
            raise ValueError("v(y, u) is only defined for reactive policies; use v1")
        return self.v1[:, 0, :]

    def to_frames(self):
        S, Y, Z, A = self.dims
        xyz = np.indices((S, Y, Z)).reshape(3, -1)
        states = pd.DataFrame({"x": xyz[0], "y": xyz[1], "z": xyz[2], "pi": self.pi.ravel(), "h": self.h.ravel()})
        if self.J_beta is not None:
            states["J_beta"] = self.J_beta.ravel()
        xyzu = np.indices((S, Y, Z, A)).reshape(4, -1)
        pi_u = (self.pi[..., None] * np.ones(A)).ravel()
        q = pd.DataFrame({"x": xyzu[0], "y": xyzu[1], "z": xyzu[2], "u": xyzu[3], "pi_xyz": pi_u, "Q": self.Q.ravel()})
        if self.Q_beta is not None:
            q["Q_beta"] = self.Q_beta.ravel()
        yzu = np.indices((Y, Z, A)).reshape(3, -1)
        v1 = pd.DataFrame({"y": yzu[0], "z": yzu[1], "u": yzu[2], "mass": self.mass1.ravel(), "v1": self.v1.ravel()})
        if self.v1_beta is not None:
            v1["v1_beta"] = self.v1_beta.ravel()
        yzuw = np.indices((Y, Z, A, Z)).reshape(4, -1)
        v2 = pd.DataFrame(
            {"y": yzuw[0], "z": yzuw[1], "u": yzuw[2], "z_next": yzuw[3], "mass": self.mass2.ravel(), "v2": self.v2.ravel()}
        )
        grad = pd.DataFrame({"param": np.arange(len(self.labels)), "label": list(self.labels), "gradient": self.gradient})
        if self.beta_gradient is not None:
            grad["beta_gradient"] = self.beta_gradient
        summary = pd.DataFrame({"eta": [self.eta], "beta": [np.nan if self.beta is None else self.beta]})
        return {"summary": summary, "states": states, "q": q, "v1": v1, "v2": v2, "gradient": grad}


def solve_exact(model, policy, beta=None):
    """Every oracle quantity for one (model, policy) pair, optionally with a discount."""
    if beta is not None and not 0.0 <= beta < 1.0:
        raise ConfigError(f"discount beta must lie in [0, 1), got {beta}")
    chain, pi, eta, h = _xyz_solution(model, policy)
    Q = q_table(model, policy, h)
    pi_u = extend_stationary(pi, policy, ChainLevel.XYZU)
    pi_uz = extend_stationary(pi, policy, ChainLevel.XYZUZ)
    v1, mass1 = conditional_means(pi_u, Q)
    v2, mass2 = conditional_means(pi_uz, bias_extended(model, policy, eta, h))
    gradient = _assemble(pi, policy, Q, _continuation(model, h))
    extra = {}
    if beta is not None:
        J = chain.reshape(np.linalg.solve(np.eye(chain.n) - beta * chain.P, chain.g))
        Q_beta = q_table(model, policy, J, beta)
        extra = dict(
            beta=beta,
            J_beta=J,
            Q_beta=Q_beta,
            v1_beta=conditional_means(pi_u, Q_beta)[0],
            beta_gradient=exact_beta_gradient(model, policy, beta),
        )
    logger.info(f"Exact solution: eta={eta:.6f}, |grad|={np.linalg.norm(gradient):.4g}")
    return ExactSolution(
        dims=(model.n_states, model.n_obs, policy.n_internal, model.n_actions),
        pi=pi,
        eta=eta,
        h=h,
        Q=Q,
        v1=v1,
        mass1=mass1,
        v2=v2,
        mass2=mass2,
        gradient=gradient,
        labels=tuple(policy.parameter_labels()),
        **extra,
    )
