"""Tests for Adam and the learning-rate schedule."""

import numpy as np
import pytest

from deep_ppde.errors import ERR_INVALID_PARAM, ERR_NUMERIC, ERR_SHAPE_MISMATCH, PPDEError
from deep_ppde.optimizer import ADAM_LITERAL, AdamState, LrSchedule, adam_step, lr_at


def make_state(params, **kwargs):
    return AdamState.zeros_like(params, **kwargs)


class TestLrSchedule:
    def test_experiment_boundaries(self):
        schedule = LrSchedule(900)
        assert schedule.boundaries == (600, 750)
        assert lr_at(schedule, 1) == 0.1
        assert lr_at(schedule, 599) == 0.1
        assert lr_at(schedule, 600) == 0.01
        assert lr_at(schedule, 749) == 0.01
        assert lr_at(schedule, 750) == 0.001
        assert lr_at(schedule, 899) == 0.001

    def test_non_increasing(self):
        schedule = LrSchedule(97)
        rates = [lr_at(schedule, p) for p in range(1, 98)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_single_iteration(self):
        assert lr_at(LrSchedule(1), 1) == 0.001

    @pytest.mark.parametrize("p", [0, 901])
    def test_out_of_range_raises(self, p):
        with pytest.raises(PPDEError) as exc_info:
            lr_at(LrSchedule(900), p)
        assert exc_info.value.code == ERR_INVALID_PARAM

    def test_increasing_values_raise(self):
        with pytest.raises(PPDEError):
            LrSchedule(10, (0.001, 0.01, 0.1))


class TestAdamStep:
    def test_zero_gradient_leaves_params(self):
        params = [np.array([1.0, -2.0]), np.array([[3.0]])]
        state, new = adam_step(make_state(params), params, [np.zeros(2), np.zeros((1, 1))], 0.1)
        for a, b in zip(params, new):
            np.testing.assert_array_equal(a, b)
        assert state.step == 1

    def test_first_step_moves_by_lr(self):
        params = [np.array([0.0, 0.0])]
        _, new = adam_step(make_state(params, epsilon=0.0), params, [np.array([3.0, -0.5])], 0.01)
        np.testing.assert_allclose(new[0], [-0.01, 0.01], rtol=1e-12)

    def test_zero_betas_sign_step(self):
        params = [np.array([1.0, 1.0])]
        state = make_state(params, beta1=0.0, beta2=0.0, epsilon=0.0)
        _, new = adam_step(state, params, [np.array([4.0, -7.0])], 0.5)
        np.testing.assert_allclose(new[0], [0.5, 1.5], rtol=1e-12)

    def test_first_moment_geometric_recursion(self):
        g = np.array([0.7])
        params = [np.zeros(1)]
        state = make_state(params)
        for _ in range(25):
            state, params = adam_step(state, params, [g], 1e-3)
        assert state.v[0][0] == pytest.approx(0.7 * (1.0 - 0.9 ** 25), abs=1e-12)
        assert state.w[0][0] == pytest.approx(0.49 * (1.0 - 0.999 ** 25), abs=1e-12)

    def test_minimises_quadratic(self):
        params = [np.array([1.0, -0.5])]
        state = make_state(params)
        for _ in range(2000):
            state, params = adam_step(state, params, [2.0 * params[0]], 0.01)
        assert np.abs(params[0]).max() < 1e-2

    def test_deterministic(self):
        grads = [np.array([0.3, -1.2])]
        runs = []
        for _ in range(2):
            params = [np.array([1.0, 1.0])]
            state = make_state(params)
            for _ in range(5):
                state, params = adam_step(state, params, grads, 0.1)
            runs.append(params[0])
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_inputs_not_modified(self):
        params = [np.array([1.0])]
        state = make_state(params)
        adam_step(state, params, [np.array([2.0])], 0.1)
        assert params[0][0] == 1.0
        assert state.step == 0
        assert state.v[0][0] == 0.0

    def test_non_finite_gradient_raises(self):
        params = [np.array([1.0, 2.0])]
        state = make_state(params)
        with pytest.raises(PPDEError) as exc_info:
            adam_step(state, params, [np.array([np.nan, 0.0])], 0.1)
        assert exc_info.value.code == ERR_NUMERIC
        np.testing.assert_array_equal(params[0], [1.0, 2.0])
        assert state.step == 0

    def test_shape_mismatch_raises(self):
        params = [np.zeros(2)]
        with pytest.raises(PPDEError) as exc_info:
            adam_step(make_state(params), params, [np.zeros(3)], 0.1)
        assert exc_info.value.code == ERR_SHAPE_MISMATCH

    def test_non_positive_lr_raises(self):
        params = [np.zeros(1)]
        with pytest.raises(PPDEError) as exc_info:
            adam_step(make_state(params), params, [np.zeros(1)], 0.0)
        assert exc_info.value.code == ERR_INVALID_PARAM


class TestPaperCompat:
    def test_unknown_mode_raises(self):
        with pytest.raises(PPDEError):
            AdamState.zeros_like([np.zeros(1)], compat="amsgrad")

    def test_first_step_uses_beta1_correction_for_both(self):
        params = [np.zeros(1)]
        state = make_state(params, epsilon=0.0, compat=ADAM_LITERAL)
        _, new = adam_step(state, params, [np.array([2.0])], 1.0)
        # v = 0.2, w = 0.004, both divided by 0.1
        expected = -(0.2 / 0.1) / np.sqrt(0.004 / 0.1)
        assert new[0][0] == pytest.approx(expected, rel=1e-12)

    def test_compat_differs_from_standard(self):
        params = [np.array([1.0])]
        grads = [np.array([0.5])]
        _, standard = adam_step(make_state(params), params, grads, 0.1)
        _, compat = adam_step(make_state(params, compat=ADAM_LITERAL), params, grads, 0.1)
        assert standard[0][0] != compat[0][0]
