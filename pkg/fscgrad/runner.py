"""Experiment runs: exact oracle dumps, per-seed estimates, estimator comparisons,
training and semi-Markov runs. Seeds fan out to threads or Celery workers and
all CSVs are written here, by one writer, in seed order.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from fscgrad import oracle
from fscgrad.actor import actor_critic_estimate, alignment, fit_critics, gpomdp_estimate, iteration_seed, locate_local_minimum, train
from fscgrad.config import EstimatorTag, ExperimentConfig, config_hash, runtime_settings
from fscgrad.critic import save_critic
from fscgrad.errors import AssumptionViolation, DimensionMismatchError
from fscgrad.model import load_model
from fscgrad.policy import load_policy, make_direct_fsc, save_policy, uniform_theta
from fscgrad.semi_markov import make_posmdp, posmdp_average_cost, posmdp_gradient_exact, posmdp_td_estimate, simulate_semi_markov
from fscgrad.simulate import hidden_view, save_trajectory, simulate

logger = logging.getLogger(__name__)


def build_policy(cfg, model):
    pc = cfg.policy
    if pc.checkpoint:
        policy = load_policy(pc.checkpoint)
        if policy.n_obs != model.n_obs or policy.n_actions != model.n_actions:
            raise DimensionMismatchError("policy checkpoint does not match the model's observation/action spaces")
        return policy
    theta = pc.theta
    if theta is None:
        theta = uniform_theta(model.n_obs, model.n_actions, pc.n_internal, pc.tie_mode, memory=pc.memory)
    return make_direct_fsc(model.n_obs, model.n_actions, pc.n_internal, pc.tie_mode, theta=theta, bounds=pc.bounds)


def build_posmdp(cfg, model):
    sm = cfg.semi_markov
    return make_posmdp(model, family=sm.family, mean=sm.mean, spread=sm.spread, cost_mode=sm.cost_mode)


def output_dir(cfg, settings=None):
    settings = settings or runtime_settings()
    out = Path(cfg.run.out_dir or Path(settings.out_dir) / cfg.run.mode)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_frame(frame, path, cfg, seed=None):
    seed = cfg.run.seed if seed is None else seed
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash(cfg)} seed={seed}\n")
        frame.to_csv(f, index=False)
    logger.info(f"Wrote {path}")
    return path


# per-seed work


def seed_job(cfg_data, index, theta):
    """Estimates for every configured tag on one trajectory. JSON in, JSON out."""
    cfg = ExperimentConfig.model_validate(cfg_data)
    model = load_model(cfg.model.path)
    policy = build_policy(cfg, model).with_theta(theta)
    est = cfg.estimator
    seed = iteration_seed(cfg.run.seed, index)
    semi_markov = cfg.run.mode == "posmdp"
    if semi_markov:
        traj = simulate_semi_markov(build_posmdp(cfg, model), policy, est.T, seed)
    else:
        traj = simulate(model, policy, est.T, seed)
    view = hidden_view(traj)

    out = {"index": index, "estimates": {}, "eta_hat": float(np.sum(view.g) / np.sum(view.sojourn))}
    if semi_markov:
        for tag in est.tags:
            out["estimates"][tag.value] = posmdp_td_estimate(view, policy, tag, est.beta, est.lam, cfg.critic).value.tolist()
        return out

    critics = None
    for tag in est.tags:
        if tag is EstimatorTag.GPOMDP:
            value = gpomdp_estimate(view, policy, est.beta).value
        else:
            if critics is None:
                critics = fit_critics(view, policy, cfg.critic, est.beta, est.lam)
            value = actor_critic_estimate(view, policy, *critics, mode=tag, beta=est.beta, lam=est.lam).value
        out["estimates"][tag.value] = value.tolist()

    if cfg.run.save_trajectories or cfg.run.save_critics:
        out_dir = output_dir(cfg)
        if cfg.run.save_trajectories:
            save_trajectory(traj, out_dir / f"trajectory_seed{index}.csv", header=f"config_hash={config_hash(cfg)} seed={index}")
        if cfg.run.save_critics and critics is not None:
            for name, critic in zip(("critic1", "critic2"), critics):
                if critic is not None:
                    save_critic(critic, out_dir / f"{name}_seed{index}.csv", header=f"config_hash={config_hash(cfg)} seed={index}")
    return out


def fan_out(cfg, theta, settings=None):
    """Run ``seed_job`` for every seed index; results come back in index order."""
    settings = settings or runtime_settings()
    cfg_data = cfg.model_dump(mode="json")
    theta = [float(v) for v in theta]
    indices = list(range(cfg.estimator.seeds))
    if settings.workers == "celery":
        from celery import group

        from fscgrad.celery_tasks import run_seed_job

        logger.info(f"Dispatching {len(indices)} seed jobs to Celery")
        results = group(run_seed_job.s(cfg_data, i, theta) for i in indices).apply_async().get()
    else:
        with ThreadPoolExecutor(max_workers=settings.max_threads) as pool:
            results = list(pool.map(lambda i: seed_job(cfg_data, i, theta), indices))
    return sorted(results, key=lambda r: r["index"])


def _trial_rows(results, reference, policy, projected):
    rows = []
    for res in results:
        for tag, value in res["estimates"].items():
            value = np.asarray(value)
            rows.append(
                {
                    "seed": res["index"],
                    "estimator": tag,
                    "alignment": alignment(value, reference, policy, projected=projected) if reference is not None else np.nan,
                    "grad_norm": float(np.linalg.norm(value)),
                    "eta_hat": res["eta_hat"],
                }
            )
    return pd.DataFrame(rows, columns=["seed", "estimator", "alignment", "grad_norm", "eta_hat"])


def summary_table(trials, tags):
    """Wide alignment table: one column per estimator, one row per seed, then mean/std/summary."""
    wide = trials.pivot(index="seed", columns="estimator", values="alignment").reindex(columns=tags)
    mean, std = wide.mean(), wide.std()
    table = wide.reset_index()
    table["seed"] = table["seed"].astype(str)
    formatted = [f"{m:.4f} ± {s:.4f}" if np.isfinite(s) else f"{m:.4f}" for m, s in zip(mean, std)]
    extra = pd.DataFrame([["mean", *mean.tolist()], ["std", *std.tolist()], ["summary", *formatted]], columns=table.columns)
    return pd.concat([table, extra], ignore_index=True)


# runs


def run_exact(cfg, settings=None):
    model = load_model(cfg.model.path)
    policy = build_policy(cfg, model)
    solution = oracle.solve_exact(model, policy, beta=cfg.estimator.beta)
    out = output_dir(cfg, settings)
    return {name: write_frame(frame, out / f"exact_{name}.csv", cfg) for name, frame in solution.to_frames().items()}


def run_estimate(cfg, settings=None):
    model = load_model(cfg.model.path)
    policy = build_policy(cfg, model)
    results = fan_out(cfg, policy.theta, settings)
    labels = policy.parameter_labels()
    reference = None
    try:
        reference = oracle.exact_gradient(model, policy)
    except AssumptionViolation as e:
        logger.warning(f"⚠️ No oracle gradient for alignment: {e}")
    rows = []
    for res in results:
        for tag, value in res["estimates"].items():
            for i, v in enumerate(value):
                rows.append({"seed": res["index"], "estimator": tag, "param": i, "label": labels[i], "estimate": v})
    out = output_dir(cfg, settings)
    paths = {"estimates": write_frame(pd.DataFrame(rows), out / "estimates.csv", cfg)}
    trials = _trial_rows(results, reference, policy, cfg.run.alignment == "projected")
    paths["trials"] = write_frame(trials, out / "trials.csv", cfg)
    return paths


def run_compare(cfg, settings=None):
    model = load_model(cfg.model.path)
    policy = build_policy(cfg, model)
    reference = oracle.exact_gradient(model, policy)
    results = fan_out(cfg, policy.theta, settings)
    trials = _trial_rows(results, reference, policy, cfg.run.alignment == "projected")
    out = output_dir(cfg, settings)
    tags = [t.value for t in cfg.estimator.tags]
    return {
        "trials": write_frame(trials, out / "trials.csv", cfg),
        "compare": write_frame(summary_table(trials, tags), out / "compare.csv", cfg),
    }


def run_train(cfg, settings=None):
    model = load_model(cfg.model.path)
    policy = build_policy(cfg, model)
    est = cfg.estimator
    tag = est.tags[0]
    logger.info(f"Training with {tag.value} for {cfg.run.iterations} iterations of T={est.T}")
    history, log = train(
        model,
        policy,
        tag,
        est.beta,
        est.lam,
        cfg.critic,
        n_iters=cfg.run.iterations,
        T=est.T,
        step=cfg.run.step,
        seed=cfg.run.seed,
        start_iter=cfg.run.start_iter,
    )
    out = output_dir(cfg, settings)
    checkpoint = out / "policy_final.json"
    save_policy(history[-1], checkpoint)
    return {"train": write_frame(log, out / "train.csv", cfg), "checkpoint": checkpoint}


def run_posmdp(cfg, settings=None):
    model = load_model(cfg.model.path)
    policy = build_policy(cfg, model)
    pmodel = build_posmdp(cfg, model)
    eta = posmdp_average_cost(pmodel, policy)
    reference = posmdp_gradient_exact(pmodel, policy)
    results = fan_out(cfg, policy.theta, settings)
    trials = _trial_rows(results, reference, policy, cfg.run.alignment == "projected")
    labels = policy.parameter_labels()
    exact = pd.DataFrame({"param": np.arange(len(labels)), "label": labels, "gradient": reference})
    exact["eta"] = eta
    out = output_dir(cfg, settings)
    return {
        "posmdp_exact": write_frame(exact, out / "posmdp_exact.csv", cfg),
        "trials": write_frame(trials, out / "trials.csv", cfg),
    }


def run_locate(cfg, settings=None, step=0.05, max_iters=5000, tol=1e-6):
    """Freeze a near-local-minimum checkpoint by exact projected descent."""
    model = load_model(cfg.model.path)
    policy = locate_local_minimum(model, build_policy(cfg, model), step=step, max_iters=max_iters, tol=tol)
    out = output_dir(cfg, settings)
    path = out / "policy_local_min.json"
    save_policy(policy, path)
    return {"checkpoint": path, "eta": oracle.average_cost(model, policy)}


RUNS = {
    "exact": run_exact,
    "estimate": run_estimate,
    "compare": run_compare,
    "train": run_train,
    "posmdp": run_posmdp,
    "locate": run_locate,
}
