import numpy as np
import pytest

from fscgrad import oracle
from fscgrad.errors import DimensionMismatchError
from fscgrad.model import ChainLevel, PomdpModel, build_joint_chain
from fscgrad.policy import make_direct_fsc
from fscgrad.simulate import HiddenView, hidden_view, load_trajectory, save_trajectory, simulate


def _cycle_model():
    return PomdpModel(
        transition=[[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]],
        observation=[[[1.0], [1.0], [1.0]]],
        cost=np.arange(3.0).reshape(3, 1, 1),
    )


def _batch_se(samples, n_batches=100):
    means = np.asarray(samples, dtype=float).reshape(n_batches, -1).mean(axis=1)
    return means.std(ddof=1) / np.sqrt(n_batches)


class TestSimulate:
    """Seeded sample paths."""

    def test_deterministic_cycle(self):
        traj = simulate(_cycle_model(), make_direct_fsc(1, 1), 10, seed=0, init=0)
        np.testing.assert_array_equal(traj.x, np.arange(10) % 3)
        np.testing.assert_array_equal(traj.g, np.arange(10) % 3)

    def test_same_seed_same_path(self, toy2, tied):
        a = simulate(toy2, tied, 500, seed=42)
        b = simulate(toy2, tied, 500, seed=42)
        for name in ("x", "y", "z", "u", "g"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_different_seeds_differ(self, toy2, tied):
        a = simulate(toy2, tied, 500, seed=1)
        b = simulate(toy2, tied, 500, seed=2)
        assert not np.array_equal(a.u, b.u)

    def test_list_seeds(self, toy2, reactive):
        a = simulate(toy2, reactive, 200, seed=[3, 1])
        b = simulate(toy2, reactive, 200, seed=[3, 2])
        assert not np.array_equal(a.u, b.u)

    def test_internal_state_starts_at_zero(self, toy2, tied):
        assert simulate(toy2, tied, 5, seed=0).z[0] == 0

    def test_realised_transitions_have_positive_probability(self, toy2, tied):
        traj = simulate(toy2, tied, 2000, seed=9)
        mu, zeta = tied.mu_table(), tied.zeta_table()
        t = np.arange(len(traj) - 1)
        assert np.all(mu[traj.z, traj.y, traj.u] > 0)
        assert np.all(zeta[traj.z[t], traj.y[t], traj.u[t], traj.z[t + 1]] > 0)
        assert np.all(toy2.transition[traj.u[t], traj.x[t], traj.x[t + 1]] > 0)
        assert np.all(toy2.observation[traj.u[t], traj.x[t + 1], traj.y[t + 1]] > 0)

    def test_rejects_empty_length(self, toy2, reactive):
        with pytest.raises(ValueError):
            simulate(toy2, reactive, 0, seed=0)

    def test_rejects_mismatched_policy(self, toy2):
        with pytest.raises(DimensionMismatchError):
            simulate(toy2, make_direct_fsc(2, 3), 10, seed=0)

    @pytest.mark.slow
    def test_long_run_frequencies(self, toy2, reactive):
        T = 1_000_000
        traj = simulate(toy2, reactive, T, seed=123)
        chain = build_joint_chain(toy2, reactive, ChainLevel.XYZ)
        pi = oracle.stationary_distribution(chain)
        eta, _ = oracle.solve_average_cost(chain, pi)
        index = traj.x * toy2.n_obs + traj.y
        for state in range(chain.n):
            hits = (index == state).astype(float)
            assert abs(hits.mean() - pi[state]) <= 4 * _batch_se(hits) + 1e-4
        assert abs(traj.g.mean() - eta) <= 4 * _batch_se(traj.g) + 1e-4


class TestHiddenView:
    """Estimator-facing view without x."""

    def test_drops_the_hidden_state(self, toy2, tied):
        traj = simulate(toy2, tied, 100, seed=4)
        view = hidden_view(traj)
        assert len(view) == len(traj)
        assert not hasattr(view, "x")

    def test_steps_line_up(self, toy2, tied, rng):
        traj = simulate(toy2, tied, 100, seed=4)
        view = hidden_view(traj)
        for t in rng.integers(0, 100, size=10):
            step = view[t]
            assert (step.y, step.z, step.u) == (traj.y[t], traj.z[t], traj.u[t])
            assert step.g == traj.g[t]

    def test_empty_view(self):
        empty = np.array([], dtype=np.int64)
        view = HiddenView(y=empty, z=empty, u=empty, g=np.array([]))
        assert len(view) == 0
        assert list(view) == []

    def test_unit_sojourns_by_default(self, toy2, reactive):
        view = hidden_view(simulate(toy2, reactive, 20, seed=0))
        np.testing.assert_array_equal(view.sojourn, 1.0)


class TestTrajectoryFiles:
    """CSV trajectory dumps."""

    def test_round_trip(self, toy2, tied, tmp_path):
        traj = simulate(toy2, tied, 50, seed=8)
        path = tmp_path / "traj.csv"
        save_trajectory(traj, path, header="config_hash=abc seed=8")
        assert path.read_text().startswith("# config_hash=abc seed=8\n")
        again = load_trajectory(path)
        for name in ("x", "y", "z", "u"):
            np.testing.assert_array_equal(getattr(again, name), getattr(traj, name))
        np.testing.assert_allclose(again.g, traj.g, rtol=1e-12)
        assert again.tau is None
