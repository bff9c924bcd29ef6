import numpy as np
import pandas as pd
import pytest
import yaml

from conftest import TOY2_PATH
from fscgrad.cli import EXIT_CONFIG, EXIT_MODEL, EXIT_OK, main
from fscgrad.config import config_hash, load_config
from fscgrad.model import PomdpModel, dump_model_json
from fscgrad.policy import TieMode, load_policy, uniform_theta
from fscgrad.runner import seed_job


def _write_config(path, **sections):
    data = {"model": {"path": str(TOY2_PATH)}}
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    path.write_text(yaml.safe_dump(data))
    return path


def _read_csv(path):
    return pd.read_csv(path, comment="#")


class TestExactCommand:
    """fscgrad exact"""

    def test_writes_every_table_with_a_provenance_header(self, tmp_path):
        assert main(["exact", "--model", str(TOY2_PATH), "--out", str(tmp_path)]) == EXIT_OK
        for name in ("summary", "states", "q", "v1", "v2", "gradient"):
            path = tmp_path / f"exact_{name}.csv"
            assert path.exists()
            assert path.read_text().startswith("# config_hash=")

    def test_header_carries_the_config_hash(self, tmp_path):
        main(["exact", "--model", str(TOY2_PATH), "--out", str(tmp_path)])
        cfg = load_config(None, {"model.path": str(TOY2_PATH), "run.out_dir": str(tmp_path), "run.mode": "exact"})
        first = (tmp_path / "exact_summary.csv").read_text().splitlines()[0]
        assert first == f"# config_hash={config_hash(cfg)} seed=0"

    def test_constant_cost_model_has_zero_gradient(self, toy2, tmp_path):
        model_path = tmp_path / "flat.json"
        model_path.write_text(dump_model_json(toy2.with_cost(np.full(toy2.cost.shape, 3.0))))
        assert main(["exact", "--model", str(model_path), "--out", str(tmp_path)]) == EXIT_OK
        grad = _read_csv(tmp_path / "exact_gradient.csv")
        np.testing.assert_allclose(grad["gradient"], 0.0, atol=1e-10)
        assert _read_csv(tmp_path / "exact_summary.csv")["eta"].iloc[0] == pytest.approx(3.0)

    def test_reducible_model_exits_with_model_error(self, tmp_path):
        model = PomdpModel(
            transition=[np.eye(2), np.eye(2)],
            observation=np.ones((2, 2, 1)),
            cost=np.zeros((2, 1, 2)),
        )
        model_path = tmp_path / "split.json"
        model_path.write_text(dump_model_json(model))
        assert main(["exact", "--model", str(model_path), "--out", str(tmp_path)]) == EXIT_MODEL

    def test_malformed_model_exits_with_model_error(self, tmp_path):
        model_path = tmp_path / "broken.json"
        model_path.write_text('{"transition": 1}')
        assert main(["exact", "--model", str(model_path), "--out", str(tmp_path)]) == EXIT_MODEL


class TestConfigErrors:
    """Configuration problems exit with code 2."""

    def test_discount_outside_the_unit_interval(self, tmp_path):
        cfg = _write_config(tmp_path / "bad.yaml", estimator={"beta": 1.5})
        assert main(["compare", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_model(self, tmp_path):
        assert main(["exact", "--model", str(tmp_path / "nope.pomdp"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert main(["exact", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG

    def test_bad_worker_setting(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FSCGRAD_WORKERS", "bogus")
        assert main(["exact", "--model", str(TOY2_PATH), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_config_hash_is_stable(self, tmp_path):
        path = _write_config(tmp_path / "a.yaml", estimator={"T": 500})
        assert config_hash(load_config(path)) == config_hash(load_config(path))
        assert config_hash(load_config(path)) != config_hash(load_config(path, {"estimator.T": 600}))


class TestEstimatorRuns:
    """compare, train and the Celery task wrapper."""

    def test_compare_is_reproducible(self, tmp_path):
        cfg = _write_config(
            tmp_path / "cmp.yaml",
            policy={"n_internal": 2, "tie_mode": "TIED_MEMORY"},
            estimator={"T": 2000, "seeds": 2},
        )
        outputs = []
        for name in ("first", "second"):
            out = tmp_path / name
            assert main(["compare", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
            outputs.append(((out / "trials.csv").read_bytes(), (out / "compare.csv").read_bytes()))
        assert outputs[0] == outputs[1]
        table = _read_csv(tmp_path / "first" / "compare.csv")
        assert list(table.columns) == ["seed", "B-TD", "OL-TD", "GPOMDP"]
        assert list(table["seed"].astype(str)) == ["0", "1", "mean", "std", "summary"]

    def test_single_seed_has_no_spread(self, tmp_path):
        cfg = _write_config(tmp_path / "one.yaml", estimator={"T": 1000, "seeds": 1, "tags": ["GPOMDP"]})
        assert main(["compare", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
        table = _read_csv(tmp_path / "compare.csv").set_index("seed")
        assert np.isnan(float(table.loc["std", "GPOMDP"]))
        assert "±" not in table.loc["summary", "GPOMDP"]

    def test_train_without_iterations_keeps_the_start(self, tmp_path):
        cfg = _write_config(
            tmp_path / "train.yaml",
            policy={"n_internal": 2, "tie_mode": "TIED_MEMORY", "memory": 0.2},
            estimator={"T": 200, "tags": ["GPOMDP"]},
            run={"iterations": 0},
        )
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
        policy = load_policy(tmp_path / "policy_final.json")
        np.testing.assert_allclose(policy.theta, uniform_theta(2, 2, 2, TieMode.TIED_MEMORY, memory=0.2), rtol=1e-15)

    def test_celery_task_matches_the_direct_call(self, tmp_path):
        from fscgrad.celery_tasks import run_seed_job

        cfg = load_config(_write_config(tmp_path / "job.yaml", estimator={"T": 300, "seeds": 1}))
        cfg_data = cfg.model_dump(mode="json")
        theta = uniform_theta(2, 2, 1, TieMode.FREE).tolist()
        via_task = run_seed_job.apply(args=[cfg_data, 0, theta]).get()
        assert via_task == seed_job(cfg_data, 0, theta)

    def test_seed_jobs_route_to_the_rollout_queue_as_json(self):
        from fscgrad.celery_tasks import app, run_seed_job

        assert app.conf.task_routes[run_seed_job.name]["queue"] == "rollouts"
        assert app.conf.task_serializer == "json"
        assert app.conf.accept_content == ["json"]
        assert app.conf.task_acks_late
