import itertools

import numpy as np
import pytest

from conftest import random_model, random_theta
from fscgrad.errors import DimensionMismatchError, ModelFormatError, NonStochasticError
from fscgrad.model import ChainLevel, JointChain, PomdpModel, build_joint_chain, dump_model_json, load_model, load_model_json
from fscgrad.oracle import stationary_distribution
from fscgrad.policy import TieMode, make_direct_fsc


class TestPomdpModel:
    """Validation of the model tables."""

    def test_shapes_are_exposed(self, toy2):
        assert (toy2.n_states, toy2.n_obs, toy2.n_actions) == (2, 2, 2)
        assert toy2.cost.shape == (2, 2, 2)

    def test_non_stochastic_transition_rejected(self):
        with pytest.raises(NonStochasticError):
            PomdpModel(transition=[[[0.5, 0.4], [0.0, 1.0]]], observation=[[[1.0], [1.0]]], cost=np.zeros((2, 1, 1)))

    def test_cost_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            PomdpModel(transition=[[[1.0, 0.0], [0.0, 1.0]]], observation=[[[1.0], [1.0]]], cost=np.zeros((2, 2, 1)))

    def test_non_finite_cost_rejected(self):
        with pytest.raises(ModelFormatError):
            PomdpModel(transition=[[[1.0]]], observation=[[[1.0]]], cost=[[[np.inf]]])

    def test_tables_are_read_only(self, toy2):
        with pytest.raises(ValueError):
            toy2.transition[0, 0, 0] = 0.5

    def test_emission_kernel_rows_sum_to_one(self, toy2):
        kernel = toy2.emission_kernel()
        np.testing.assert_allclose(kernel.sum(axis=(2, 3)), 1.0, atol=1e-12)


class TestJsonFormat:
    """Structured model files."""

    def test_round_trip(self, toy2):
        again = load_model_json(dump_model_json(toy2))
        np.testing.assert_array_equal(again.transition, toy2.transition)
        np.testing.assert_array_equal(again.observation, toy2.observation)
        np.testing.assert_array_equal(again.cost, toy2.cost)
        assert again.state_names == toy2.state_names

    def test_reward_sign_is_flipped(self):
        text = (
            '{"states": ["a"], "observations": ["o"], "actions": ["u"], "transition": [[[1.0]]],'
            ' "observation": [[[1.0]]], "cost": [[[2.5]]], "values": "reward"}'
        )
        assert load_model_json(text).cost[0, 0, 0] == -2.5

    def test_malformed_document(self):
        with pytest.raises(ModelFormatError):
            load_model_json('{"states": []}')

    def test_load_model_dispatches_on_suffix(self, toy2, tmp_path):
        path = tmp_path / "toy2.json"
        path.write_text(dump_model_json(toy2))
        np.testing.assert_array_equal(load_model(path).transition, toy2.transition)


class TestJointChain:
    """Joint chains over (x, y, z[, u[, z']])."""

    def test_rows_are_stochastic_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            S, Y, A, Z = (int(v) for v in rng.integers(1, 4, size=4))
            model = random_model(rng, S, Y, A)
            mode = TieMode.TIED_MEMORY if Z == Y and rng.random() < 0.5 else TieMode.FREE
            policy = random_theta(make_direct_fsc(Y, A, Z, mode), rng)
            for level in ChainLevel:
                chain = build_joint_chain(model, policy, level)
                np.testing.assert_allclose(chain.P.sum(axis=1), 1.0, atol=1e-12)
                np.testing.assert_allclose(chain.next_xyz.sum(axis=1), 1.0, atol=1e-12)

    def test_xyz_matches_brute_force_enumeration(self, toy2, tied):
        chain = build_joint_chain(toy2, tied, ChainLevel.XYZ)
        mu, zeta = tied.mu_table(), tied.zeta_table()
        S, Y, Z, A = toy2.n_states, toy2.n_obs, tied.n_internal, toy2.n_actions
        for x, y, z, x2, y2, z2 in itertools.product(range(S), range(Y), range(Z), range(S), range(Y), range(Z)):
            expected = sum(
                mu[z, y, u] * zeta[z, y, u, z2] * toy2.transition[u, x, x2] * toy2.observation[u, x2, y2]
                for u in range(A)
            )
            i = (x * Y + y) * Z + z
            j = (x2 * Y + y2) * Z + z2
            assert chain.P[i, j] == pytest.approx(expected, abs=1e-14)

    def test_identity_transitions_keep_the_state(self):
        model = PomdpModel(
            transition=np.stack([np.eye(3)] * 2),
            observation=np.full((2, 3, 2), 0.5),
            cost=np.zeros((3, 2, 2)),
        )
        chain = build_joint_chain(model, make_direct_fsc(2, 2), ChainLevel.XYZ)
        blocks = chain.P.reshape(3, 2, 3, 2)
        for x, x2 in itertools.permutations(range(3), 2):
            assert np.all(blocks[x, :, x2, :] == 0.0)

    def test_xyzu_stationary_marginalises_to_xyz(self, toy2, free_fsc):
        pi_xyz = stationary_distribution(build_joint_chain(toy2, free_fsc, ChainLevel.XYZ))
        xyzu = build_joint_chain(toy2, free_fsc, ChainLevel.XYZU)
        pi_xyzu = xyzu.reshape(stationary_distribution(xyzu))
        np.testing.assert_allclose(pi_xyzu.sum(axis=-1).ravel(), pi_xyz, atol=1e-10)

    def test_deterministic_policy_picks_one_transition_matrix(self, toy2):
        policy = make_direct_fsc(2, 2, theta=[1.0, 1.0])
        chain = build_joint_chain(toy2, policy, ChainLevel.XYZ)
        expected = np.einsum("ab,bc->abc", toy2.transition[0], toy2.observation[0])
        expected = np.repeat(expected[:, None, :, :], 2, axis=1).reshape(4, 4)
        np.testing.assert_allclose(chain.P, expected, atol=1e-14)

    def test_space_mismatch(self, toy2):
        with pytest.raises(DimensionMismatchError):
            build_joint_chain(toy2, make_direct_fsc(3, 2), ChainLevel.XYZ)

    def test_states_enumeration_order(self, toy2, tied):
        chain = build_joint_chain(toy2, tied, ChainLevel.XYZU)
        states = chain.states
        assert states.shape == (chain.n, 4)
        assert tuple(states[1]) == (0, 0, 0, 1)
        assert tuple(states[-1]) == (1, 1, 1, 1)

    def test_from_matrix_rejects_substochastic_rows(self):
        with pytest.raises(NonStochasticError):
            JointChain.from_matrix([[0.5, 0.4], [0.0, 1.0]])
