"""Forward simulation of the discretised driving process and path functionals.

A batch of paths is stored as an ``(O, i+1, d)`` array: sample, grid index,
coordinate. The regression at grid index ``i`` consumes exactly the first
``i+1`` points of every path.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from deep_ppde.errors import ERR_INVALID_PARAM, ERR_IO, ERR_SHAPE_MISMATCH, PPDEError
from deep_ppde.tensor_core import RngStream, ensure_finite

logger = logging.getLogger(__name__)

# Relative slack when matching a query time or a step size against the grid.
GRID_TOLERANCE = 1e-9

DriftFn = Callable[[float, np.ndarray], np.ndarray]
DiffusionFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0, h, ..., N h = T``."""

    horizon: float
    steps: int

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"grid needs at least one step, got {self.steps}")
        if not self.horizon > 0:
            raise PPDEError(ERR_INVALID_PARAM, f"horizon must be positive, got {self.horizon}")

    @classmethod
    def from_step(cls, horizon: float, step: float) -> TimeGrid:
        """Build the grid with step ``step``; ``horizon`` must be a multiple of it."""
        if not step > 0:
            raise PPDEError(ERR_INVALID_PARAM, f"step must be positive, got {step}")
        steps = int(round(horizon / step))
        if steps < 1 or abs(steps * step - horizon) > GRID_TOLERANCE * max(1.0, horizon):
            raise PPDEError(
                ERR_INVALID_PARAM,
                f"horizon {horizon} is not a whole number of steps of size {step}",
            )
        return cls(horizon=float(horizon), steps=steps)

    @property
    def step(self) -> float:
        return self.horizon / self.steps

    def time(self, index: int) -> float:
        return index * self.step


@dataclass(frozen=True)
class IncrementBatch:
    """Brownian increments ``B_h`` of one grid step, shape ``(O, d)``."""

    values: np.ndarray
    step: float

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PathBatch:
    """Discretised paths known up to grid index ``known_steps``."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise PPDEError(
                ERR_SHAPE_MISMATCH, f"paths must be (batch, points, dim), got {self.values.shape}"
            )
        if self.values.shape[1] > self.grid.steps + 1:
            raise PPDEError(
                ERR_SHAPE_MISMATCH,
                f"{self.values.shape[1]} points exceed a grid of {self.grid.steps} steps",
            )

    @classmethod
    def start(cls, x0: Sequence[float], batch: int, grid: TimeGrid, dtype: type = np.float64) -> PathBatch:
        """All ``batch`` paths sitting at ``x0`` at time 0."""
        origin = np.asarray(x0, dtype=dtype).reshape(1, 1, -1)
        return cls(values=np.repeat(origin, batch, axis=0), grid=grid)

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def known_steps(self) -> int:
        return self.values.shape[1] - 1

    def flat(self, points: Optional[int] = None) -> np.ndarray:
        """The first ``points`` grid points of every path as ``(O, points*d)``."""
        points = self.values.shape[1] if points is None else points
        return self.values[:, :points, :].reshape(self.batch, points * self.dim)


def euler_step(
    batch: PathBatch,
    drift_eval: np.ndarray,
    diffusion_eval: np.ndarray,
    increments: IncrementBatch,
) -> PathBatch:
    """Append ``x + b h + sigma B_h`` to every path of ``batch``."""
    count, dim = batch.batch, batch.dim
    if drift_eval.shape != (count, dim):
        raise PPDEError(ERR_SHAPE_MISMATCH, f"drift shape {drift_eval.shape} != {(count, dim)}")
    if diffusion_eval.shape != (count, dim, dim):
        raise PPDEError(
            ERR_SHAPE_MISMATCH, f"diffusion shape {diffusion_eval.shape} != {(count, dim, dim)}"
        )
    if increments.values.shape != (count, dim):
        raise PPDEError(
            ERR_SHAPE_MISMATCH, f"increment shape {increments.values.shape} != {(count, dim)}"
        )
    if batch.known_steps >= batch.grid.steps:
        raise PPDEError(ERR_INVALID_PARAM, "paths already cover the whole grid")
    ensure_finite(drift_eval, "drift")
    ensure_finite(diffusion_eval, "diffusion")

    last = batch.values[:, -1, :]
    shock = np.einsum("oij,oj->oi", diffusion_eval, increments.values)
    new_point = last + drift_eval * batch.grid.step + shock
    return PathBatch(
        values=np.concatenate([batch.values, new_point[:, None, :]], axis=1),
        grid=batch.grid,
    )


def simulate(
    x0: Sequence[float],
    drift_fn: DriftFn,
    diffusion_fn: DiffusionFn,
    grid: TimeGrid,
    batch: int,
    steps: int,
    rng: RngStream,
    dtype: type = np.float64,
) -> Tuple[PathBatch, Optional[IncrementBatch]]:
    """Run ``steps`` Euler steps from ``x0``.

    Returns the paths and the increments of the last step (``None`` when
    ``steps`` is 0).
    """
    if steps < 0 or steps > grid.steps:
        raise PPDEError(ERR_INVALID_PARAM, f"cannot simulate {steps} steps on {grid.steps}")
    paths = PathBatch.start(x0, batch, grid, dtype=dtype)
    stddev = math.sqrt(grid.step)
    increments: Optional[IncrementBatch] = None
    for k in range(steps):
        t = grid.time(k)
        increments = IncrementBatch(
            values=rng.normal((batch, paths.dim), stddev=stddev, dtype=dtype), step=grid.step
        )
        paths = euler_step(paths, drift_fn(t, paths.values), diffusion_fn(t, paths.values), increments)
    return paths, increments


def interpolate(points: np.ndarray, grid: TimeGrid, query_time: float) -> np.ndarray:
    """Linear interpolation of the known points at ``query_time``.

    The path is held flat after its last known point.
    """
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[0] < 1:
        raise PPDEError(ERR_SHAPE_MISMATCH, f"points must be (i+1, d), got {points.shape}")
    if query_time < 0 or query_time > grid.horizon:
        raise PPDEError(
            ERR_INVALID_PARAM, f"query time {query_time} outside [0, {grid.horizon}]"
        )
    last = points.shape[0] - 1
    position = query_time / grid.step
    nearest = int(round(position))
    if abs(position - nearest) <= GRID_TOLERANCE * max(1.0, position):
        return points[min(nearest, last)].copy()
    cell = int(math.floor(position))
    if cell >= last:
        return points[last].copy()
    weight = position - cell
    return weight * points[cell + 1] + (1.0 - weight) * points[cell]


def trapezoid_integral(points: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Trapezoid rule over the known points, along the grid axis (-2)."""
    points = np.asarray(points)
    if points.ndim < 2 or points.shape[-2] == 0:
        raise PPDEError(ERR_SHAPE_MISMATCH, f"points must be (..., i+1, d), got {points.shape}")
    if points.shape[-2] == 1:
        return np.zeros_like(points[..., 0, :])
    edges = 0.5 * (points[..., 0, :] + points[..., -1, :])
    return grid.step * (points.sum(axis=-2) - edges)


def running_max_mean(points: np.ndarray) -> np.ndarray:
    """Largest cross-dimension mean over the grid points."""
    points = np.asarray(points)
    if points.ndim < 2 or points.shape[-2] == 0:
        raise PPDEError(ERR_SHAPE_MISMATCH, f"points must be (..., i+1, d), got {points.shape}")
    return points.mean(axis=-1).max(axis=-1)


def dump_paths_csv(batch: PathBatch, path: str) -> None:
    """Write one ``sample,step,x_1..x_d`` row per sample and grid point."""
    header = ["sample", "step"] + [f"x_{j + 1}" for j in range(batch.dim)]
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for sample in range(batch.batch):
                for step in range(batch.known_steps + 1):
                    writer.writerow(
                        [sample, step] + [repr(float(v)) for v in batch.values[sample, step]]
                    )
    except OSError as exc:
        raise PPDEError(ERR_IO, f"cannot write path dump {path}: {exc}") from exc
    logger.debug("dumped %d paths to %s", batch.batch, path)
