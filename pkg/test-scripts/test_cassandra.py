import numpy as np
import pytest

from fscgrad.cassandra import parse_pomdp, serialize_pomdp, tokenize
from fscgrad.errors import ModelFormatError, NonStochasticError
from fscgrad.model import PomdpModel

MINIMAL = """\
# two states that never move
discount: 0.95
values: reward
states: 2
actions: 1
observations: 2
T: 0 identity
O: 0 uniform
R: * : * : * : * 1.0
"""

ALOHA_HEADER = """\
discount: 0.95
values: reward
states: 30
actions: 9
observations: 3
start: uniform
T: * uniform
O: * uniform
"""

SHORT_ROW = """\
states: 2
actions: 1
observations: 1
T: 0
0.9 0.0
0.0 1.0
O: * uniform
"""


class TestParse:
    """Reading `.pomdp` text."""

    def test_identity_uniform_file(self):
        model = parse_pomdp(MINIMAL)
        np.testing.assert_array_equal(model.transition[0], np.eye(2))
        np.testing.assert_array_equal(model.observation[0], np.full((2, 2), 0.5))
        assert np.all(model.cost == -1.0)
        assert model.discount == 0.95

    def test_aloha_sized_declarations(self):
        model = parse_pomdp(ALOHA_HEADER)
        assert (model.n_states, model.n_obs, model.n_actions) == (30, 3, 9)
        np.testing.assert_allclose(model.start_distribution(), 1.0 / 30)

    def test_short_row_reports_its_line(self):
        with pytest.raises(NonStochasticError) as info:
            parse_pomdp(SHORT_ROW)
        assert info.value.line == 4
        assert "line 4" in str(info.value)

    def test_undeclared_identifier(self):
        with pytest.raises(ModelFormatError, match="undeclared state"):
            parse_pomdp(MINIMAL + "T: 0 : s9 : 0 1.0\n")

    def test_entries_before_declarations(self):
        with pytest.raises(ModelFormatError):
            parse_pomdp("T: 0 identity\nstates: 2\n")

    def test_small_deviations_are_renormalised(self):
        text = "states: 2\nactions: 1\nobservations: 1\nT: 0\n0.5 0.5000000005\n0 1\nO: * uniform\n"
        model = parse_pomdp(text)
        assert abs(model.transition[0, 0].sum() - 1.0) <= 1e-12

    def test_element_and_row_forms(self):
        text = (
            "states: a b\nactions: go\nobservations: o\n"
            "T: go : a : b 1.0\nT: go : b\n0.25 0.75\n"
            "O: * : * : o 1.0\n"
            "R: go : a : * : * 4\nR: go : b : a : o 2\nR: go : b : b : o 6\n"
            "values: cost\n"
        )
        model = parse_pomdp(text)
        np.testing.assert_array_equal(model.transition[0], [[0.0, 1.0], [0.25, 0.75]])
        # cost(b) averages the next-state rewards: 0.25 * 2 + 0.75 * 6
        np.testing.assert_allclose(model.cost[:, 0, 0], [4.0, 5.0])

    def test_start_include(self):
        text = "states: a b c\nactions: 1\nobservations: 1\nstart include: a c\nT: * identity\nO: * uniform\n"
        np.testing.assert_allclose(parse_pomdp(text).start_distribution(), [0.5, 0.0, 0.5])

    def test_start_typed_to_four_decimals_is_renormalised(self):
        text = "states: 3\nactions: 1\nobservations: 1\nstart: 0.3333 0.3333 0.3333\nT: * identity\nO: * uniform\n"
        start = parse_pomdp(text).start_distribution()
        assert abs(start.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(start, 1.0 / 3)

    def test_start_far_from_one_reports_its_line(self):
        text = "states: 3\nactions: 1\nobservations: 1\nstart: 0.3 0.3 0.3\nT: * identity\nO: * uniform\n"
        with pytest.raises(NonStochasticError) as info:
            parse_pomdp(text)
        assert info.value.line == 4

    def test_negative_start_entry(self):
        text = "states: 2\nactions: 1\nobservations: 1\nstart: 1.2 -0.2\nT: * identity\nO: * uniform\n"
        with pytest.raises(NonStochasticError, match="negative"):
            parse_pomdp(text)

    def test_comments_are_skipped(self):
        assert [tok for tok, _ in tokenize("states: 2 # two\n# nothing\n")] == ["states", ":", "2"]


class TestSerialize:
    """Writing `.pomdp` text."""

    def test_round_trip_is_exact(self, toy2):
        again = parse_pomdp(serialize_pomdp(toy2))
        np.testing.assert_array_equal(again.transition, toy2.transition)
        np.testing.assert_array_equal(again.observation, toy2.observation)
        np.testing.assert_array_equal(again.cost, toy2.cost)
        np.testing.assert_array_equal(again.start_distribution(), toy2.start_distribution())
        assert again.discount == toy2.discount

    def test_observation_dependent_cost_is_refused(self):
        model = PomdpModel(
            transition=[[[1.0]]],
            observation=[[[0.5, 0.5]]],
            cost=[[[1.0], [2.0]]],
        )
        with pytest.raises(ModelFormatError):
            serialize_pomdp(model)
