import numpy as np
import pytest

from dmt.adam import AdamState, adam_step
from dmt.tensor import Parameter, ShapeError, TensorEngineError


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        p = Parameter([0.0], "p")
        adam_step([p], [np.array([1.0])], AdamState(lr=0.1))
        assert p.value[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-12)

    def test_step_counter_and_moments(self):
        p = Parameter(np.ones((2, 2)), "w")
        state = AdamState(lr=0.01)
        for _ in range(3):
            adam_step([p], [np.full((2, 2), 0.5)], state)
        assert state.step == 3
        assert state.m["w"].shape == (2, 2)
        assert state.v["w"].shape == (2, 2)

    def test_descends_a_quadratic(self):
        p = Parameter([4.0, -3.0], "p")
        state = AdamState(lr=0.1)
        for _ in range(300):
            adam_step([p], [2 * p.value], state)
        assert np.all(np.abs(p.value) < 0.05)

    def test_value_is_replaced_not_mutated(self):
        p = Parameter([1.0], "p")
        snapshot = p.value
        adam_step([p], [np.array([1.0])], AdamState())
        assert snapshot[0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step([Parameter([1.0, 2.0], "p")], [np.array([1.0])], AdamState())

    def test_non_positive_learning_rate(self):
        with pytest.raises(TensorEngineError):
            AdamState(lr=0.0)
