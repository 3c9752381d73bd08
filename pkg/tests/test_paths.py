"""Tests for path simulation and path functionals."""

import csv
import math

import numpy as np
import pytest

from deep_ppde.errors import ERR_INVALID_PARAM, ERR_NUMERIC, ERR_SHAPE_MISMATCH, PPDEError
from deep_ppde.paths import (
    IncrementBatch,
    PathBatch,
    TimeGrid,
    dump_paths_csv,
    euler_step,
    interpolate,
    running_max_mean,
    simulate,
    trapezoid_integral,
)
from deep_ppde.tensor_core import RngStream


def make_grid(horizon=0.1, steps=10):
    return TimeGrid(horizon=horizon, steps=steps)


def make_start(x0=(0.0,), batch=4, grid=None):
    return PathBatch.start(x0, batch, grid or make_grid())


def gbm_drift(t, paths):
    return 0.01 * paths[:, -1, :]


def gbm_diffusion(t, paths):
    last = paths[:, -1, :]
    out = np.zeros(last.shape + (last.shape[1],))
    idx = np.arange(last.shape[1])
    out[:, idx, idx] = 0.1 * last
    return out


class TestTimeGrid:
    def test_step(self):
        assert make_grid().step == pytest.approx(0.01)

    def test_from_step(self):
        grid = TimeGrid.from_step(0.1, 0.02)
        assert grid.steps == 5

    def test_from_step_not_multiple_raises(self):
        with pytest.raises(PPDEError) as exc_info:
            TimeGrid.from_step(0.1, 0.03)
        assert exc_info.value.code == ERR_INVALID_PARAM

    def test_zero_steps_raises(self):
        with pytest.raises(PPDEError) as exc_info:
            TimeGrid(horizon=1.0, steps=0)
        assert exc_info.value.code == ERR_INVALID_PARAM

    def test_steps_times_step_is_horizon(self):
        grid = TimeGrid(horizon=0.1, steps=10)
        assert grid.steps * grid.step == pytest.approx(grid.horizon, rel=1e-15)


class TestEulerStep:
    def test_frozen_dynamics(self):
        batch = make_start(x0=(1.0, 2.0), batch=3)
        out = euler_step(
            batch,
            np.zeros((3, 2)),
            np.broadcast_to(np.eye(2), (3, 2, 2)).copy(),
            IncrementBatch(values=np.zeros((3, 2)), step=0.01),
        )
        np.testing.assert_array_equal(out.values[:, 1, :], out.values[:, 0, :])
        assert out.known_steps == 1

    def test_gbm_coefficients_by_hand(self):
        batch = make_start(x0=(1.0,), batch=1)
        out = euler_step(
            batch,
            gbm_drift(0.0, batch.values),
            gbm_diffusion(0.0, batch.values),
            IncrementBatch(values=np.array([[0.05]]), step=0.01),
        )
        assert out.values[0, 1, 0] == pytest.approx(1.0051, abs=1e-12)

    def test_control_process_stays_at_origin(self):
        batch = make_start(x0=(0.0, 0.0), batch=2)
        sigma = math.sqrt(0.04) * np.broadcast_to(np.eye(2), (2, 2, 2))
        out = euler_step(batch, np.zeros((2, 2)), sigma.copy(), IncrementBatch(np.zeros((2, 2)), 0.01))
        np.testing.assert_array_equal(out.values, np.zeros((2, 2, 2)))

    def test_history_preserved(self):
        rng = RngStream(0)
        paths, _ = simulate((1.0, 1.0), gbm_drift, gbm_diffusion, make_grid(), 5, 3, rng)
        inc = IncrementBatch(values=rng.normal((5, 2), stddev=0.1), step=0.01)
        out = euler_step(paths, gbm_drift(0.0, paths.values), gbm_diffusion(0.0, paths.values), inc)
        np.testing.assert_array_equal(out.values[:, :4, :], paths.values)

    def test_shape_mismatch_raises(self):
        batch = make_start(batch=3)
        with pytest.raises(PPDEError) as exc_info:
            euler_step(batch, np.zeros((2, 1)), np.ones((3, 1, 1)), IncrementBatch(np.zeros((3, 1)), 0.01))
        assert exc_info.value.code == ERR_SHAPE_MISMATCH

    def test_non_finite_diffusion_names_sample(self):
        batch = make_start(batch=3)
        sigma = np.ones((3, 1, 1))
        sigma[1, 0, 0] = np.nan
        with pytest.raises(PPDEError) as exc_info:
            euler_step(batch, np.zeros((3, 1)), sigma, IncrementBatch(np.zeros((3, 1)), 0.01))
        assert exc_info.value.code == ERR_NUMERIC
        assert "sample 1" in exc_info.value.message

    def test_full_grid_raises(self):
        grid = make_grid(horizon=0.01, steps=1)
        paths, _ = simulate((0.0,), gbm_drift, gbm_diffusion, grid, 2, 1, RngStream(0))
        with pytest.raises(PPDEError):
            euler_step(paths, np.zeros((2, 1)), np.ones((2, 1, 1)), IncrementBatch(np.zeros((2, 1)), 0.01))


class TestSimulate:
    def test_shapes_and_start(self):
        paths, inc = simulate((1.0, 2.0, 3.0), gbm_drift, gbm_diffusion, make_grid(), 6, 4, RngStream(1))
        assert paths.values.shape == (6, 5, 3)
        assert inc.values.shape == (6, 3)
        np.testing.assert_array_equal(paths.values[:, 0, :], np.tile([1.0, 2.0, 3.0], (6, 1)))

    def test_zero_steps(self):
        paths, inc = simulate((0.0,), gbm_drift, gbm_diffusion, make_grid(), 2, 0, RngStream(1))
        assert paths.known_steps == 0
        assert inc is None

    def test_increment_stddev(self):
        _, inc = simulate((0.0,), gbm_drift, gbm_diffusion, make_grid(), 100_000, 1, RngStream(2))
        assert inc.values.std() == pytest.approx(0.1, rel=0.02)

    def test_flat_prefix(self):
        paths, _ = simulate((1.0, 2.0), gbm_drift, gbm_diffusion, make_grid(), 3, 2, RngStream(0))
        flat = paths.flat(2)
        assert flat.shape == (3, 4)
        np.testing.assert_array_equal(flat[:, :2], paths.values[:, 0, :])

    def test_fourth_moment_of_running_max_is_stable(self):
        paths, _ = simulate((1.0,), gbm_drift, gbm_diffusion, make_grid(), 100_000, 10, RngStream(4))
        peak = np.max(np.abs(paths.values[:, :, 0]), axis=1) ** 4
        assert np.isfinite(peak).all()
        first, second = peak[:50_000].mean(), peak[50_000:].mean()
        assert abs(first - second) / first < 0.2


class TestInterpolate:
    def test_node_values_exact(self):
        grid = make_grid()
        points = RngStream(0).normal((6, 2))
        for k in range(6):
            np.testing.assert_array_equal(interpolate(points, grid, k * grid.step), points[k])

    def test_midpoint(self):
        grid = TimeGrid(horizon=2.0, steps=2)
        assert interpolate(np.array([[0.0], [2.0]]), grid, 0.5)[0] == pytest.approx(1.0)

    def test_flat_extension(self):
        grid = TimeGrid(horizon=2.0, steps=2)
        assert interpolate(np.array([[0.0], [2.0]]), grid, 1.7)[0] == 2.0

    def test_affine_within_cell(self):
        grid = TimeGrid(horizon=3.0, steps=3)
        points = np.array([[0.0, 1.0], [1.0, -1.0], [4.0, 0.5], [2.0, 2.0]])
        a, b, c = (interpolate(points, grid, s) for s in (1.1, 1.4, 1.7))
        np.testing.assert_allclose(b - a, c - b, atol=1e-12)

    def test_outside_horizon_raises(self):
        with pytest.raises(PPDEError) as exc_info:
            interpolate(np.zeros((2, 1)), make_grid(), 0.2)
        assert exc_info.value.code == ERR_INVALID_PARAM


class TestTrapezoidIntegral:
    def test_constant_path(self):
        grid = make_grid()
        points = np.full((11, 2), 3.0)
        np.testing.assert_allclose(trapezoid_integral(points, grid), [0.3, 0.3], rtol=1e-12)

    def test_single_trapezoid(self):
        grid = make_grid()
        assert trapezoid_integral(np.array([[0.0], [1.0]]), grid)[0] == pytest.approx(0.005)

    def test_constant_average(self):
        grid = make_grid()
        points = np.ones((11, 1))
        assert trapezoid_integral(points, grid)[0] / grid.horizon == pytest.approx(1.0, rel=1e-12)

    def test_single_point_is_zero(self):
        np.testing.assert_array_equal(trapezoid_integral(np.array([[5.0, 1.0]]), make_grid()), [0.0, 0.0])

    def test_batched(self):
        grid = make_grid()
        points = np.stack([np.zeros((3, 1)), np.ones((3, 1))])
        np.testing.assert_allclose(trapezoid_integral(points, grid)[:, 0], [0.0, 0.02])

    def test_empty_raises(self):
        with pytest.raises(PPDEError) as exc_info:
            trapezoid_integral(np.zeros((0, 1)), make_grid())
        assert exc_info.value.code == ERR_SHAPE_MISMATCH


class TestRunningMaxMean:
    def test_constant(self):
        assert running_max_mean(np.ones((5, 3))) == 1.0

    def test_one_dimension(self):
        assert running_max_mean(np.array([[1.0], [1.3], [1.1]])) == pytest.approx(1.3)

    def test_mean_then_max(self):
        assert running_max_mean(np.array([[1.0, 1.0], [1.4, 1.0]])) == pytest.approx(1.2)


class TestDumpCsv:
    def test_rows(self, tmp_path):
        paths, _ = simulate((0.0, 1.0), gbm_drift, gbm_diffusion, make_grid(), 2, 3, RngStream(0))
        target = tmp_path / "paths.csv"
        dump_paths_csv(paths, str(target))
        with open(target, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["sample", "step", "x_1", "x_2"]
        assert len(rows) == 1 + 2 * 4
        assert float(rows[-1][3]) == paths.values[1, 3, 1]

    def test_unwritable_raises(self, tmp_path):
        paths = make_start()
        with pytest.raises(PPDEError):
            dump_paths_csv(paths, str(tmp_path / "missing" / "paths.csv"))
