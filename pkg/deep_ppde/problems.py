"""PPDE problems: drift, diffusion, generator and terminal functional.

Every callable works on a batch of path prefixes ``paths`` of shape
``(O, k+1, d)``; drift and diffusion are evaluated at the last known point.
Three benchmark problems are registered by name:

    ControlProblem  path-dependent two-person zero-sum game (fully nonlinear)
    AsianOption     Asian basket call under geometric Brownian motion (linear)
    BarrierOption   up-and-out barrier basket call (linear)

Custom problems subclass :class:`ProblemSpec` and call
:func:`register_problem`.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional, Sequence, Tuple, Type, Union

import numpy as np

from deep_ppde.errors import ERR_INVALID_PARAM, ERR_NUMERIC, PPDEError
from deep_ppde.paths import TimeGrid, running_max_mean, trapezoid_integral
from deep_ppde.tensor_core import RngStream

logger = logging.getLogger(__name__)

GENERATOR_LINEAR = "linear"
GENERATOR_SEMILINEAR = "semilinear"
GENERATOR_FULLY_NONLINEAR = "fully_nonlinear"
GENERATOR_KINDS = (GENERATOR_LINEAR, GENERATOR_SEMILINEAR, GENERATOR_FULLY_NONLINEAR)

SYMMETRY_TOLERANCE = 1e-9
MAX_CONDITION_NUMBER = 1e12

PerAsset = Union[float, Tuple[float, ...]]


@dataclass(frozen=True)
class GameParams:
    """Control bounds of the zero-sum game: drift in [mu_low, mu_high], variance in [a_low, a_high]."""

    mu_low: float = -0.2
    mu_high: float = 0.2
    a_low: float = 0.04
    a_high: float = 0.09

    def __post_init__(self) -> None:
        if self.mu_low > self.mu_high:
            raise PPDEError(ERR_INVALID_PARAM, f"mu_low {self.mu_low} exceeds mu_high {self.mu_high}")
        if not 0 < self.a_low <= self.a_high:
            raise PPDEError(
                ERR_INVALID_PARAM, f"need 0 < a_low <= a_high, got {self.a_low}, {self.a_high}"
            )


@dataclass(frozen=True)
class OptionParams:
    """Discount rate, per-asset drifts and volatilities, strike and barrier."""

    r0: float = 0.01
    rates: PerAsset = 0.01
    sigmas: PerAsset = 0.1
    strike: float = 0.7
    barrier: float = 1.2

    def __post_init__(self) -> None:
        if (np.asarray(self.sigmas, dtype=np.float64) < 0).any():
            raise PPDEError(ERR_INVALID_PARAM, f"volatilities must be non-negative, got {self.sigmas}")

    def rate_vector(self, dim: int) -> np.ndarray:
        return _per_asset(self.rates, dim, "rates")

    def sigma_vector(self, dim: int) -> np.ndarray:
        return _per_asset(self.sigmas, dim, "sigmas")


def _per_asset(value: PerAsset, dim: int, name: str) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        return np.full(dim, float(array))
    if array.shape != (dim,):
        raise PPDEError(ERR_INVALID_PARAM, f"{name} must be a scalar or {dim} values, got {array.shape}")
    return array


class ProblemSpec(ABC):
    """A PPDE ``du/dt + ... + F(t, w, u, z, gamma) = 0``, ``u(T, w) = g(w)``.

    ``z`` and ``gamma`` are the scaled derivatives ``sigma^T du`` and
    ``sigma^T d2u sigma`` recovered by the Monte Carlo weights.
    """

    name: str = ""
    generator_kind: str = GENERATOR_FULLY_NONLINEAR

    def __init__(self, dim: int, grid: TimeGrid, x0: Optional[Sequence[float]] = None) -> None:
        if dim < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"dimension must be at least 1, got {dim}")
        if self.generator_kind not in GENERATOR_KINDS:
            raise PPDEError(ERR_INVALID_PARAM, f"unknown generator kind {self.generator_kind!r}")
        self.dim = dim
        self.grid = grid
        origin = self.default_x0(dim) if x0 is None else np.asarray(x0, dtype=np.float64)
        if origin.shape != (dim,):
            raise PPDEError(ERR_INVALID_PARAM, f"x0 must have {dim} entries, got {origin.shape}")
        self.x0 = origin

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    @property
    def needs_z(self) -> bool:
        return self.generator_kind != GENERATOR_LINEAR

    @property
    def needs_gamma(self) -> bool:
        return self.generator_kind == GENERATOR_FULLY_NONLINEAR

    def default_x0(self, dim: int) -> np.ndarray:
        return np.zeros(dim)

    def describe(self) -> dict:
        """Parameters identifying this instance (config echo, oracle cache keys)."""
        return {"name": self.name, "dim": self.dim, "x0": self.x0.tolist()}

    @abstractmethod
    def drift(self, t: float, paths: np.ndarray) -> np.ndarray:
        """Drift ``b`` at the last point, shape ``(O, d)``."""

    @abstractmethod
    def diffusion(self, t: float, paths: np.ndarray) -> np.ndarray:
        """Diffusion ``sigma`` at the last point, shape ``(O, d, d)``."""

    @abstractmethod
    def generator(
        self,
        t: float,
        paths: np.ndarray,
        y: np.ndarray,
        z: Optional[np.ndarray],
        gamma: Optional[np.ndarray],
    ) -> np.ndarray:
        """Generator ``F``, shape ``(O,)``."""

    @abstractmethod
    def terminal(self, paths: np.ndarray) -> np.ndarray:
        """Terminal functional ``g`` of full-grid paths, shape ``(O,)``."""


def check_problem(problem: ProblemSpec, samples: int = 8, seed: int = 0) -> None:
    """Spot-check a problem: invertible diffusion, and a linear generator ignoring z and gamma."""
    rng = RngStream(seed)
    d = problem.dim
    paths = problem.x0.reshape(1, 1, d) + rng.normal((samples, 1, d), stddev=0.01)
    sigma = problem.diffusion(0.0, paths)
    conditions = np.linalg.cond(sigma)
    if not np.isfinite(conditions).all() or (conditions > MAX_CONDITION_NUMBER).any():
        raise PPDEError(ERR_NUMERIC, f"diffusion of {problem.name} is not invertible near x0")
    if problem.generator_kind == GENERATOR_LINEAR:
        y = rng.normal(samples)
        base = problem.generator(0.0, paths, y, np.zeros((samples, d)), np.zeros((samples, d, d)))
        z = rng.normal((samples, d))
        a = rng.normal((samples, d, d))
        moved = problem.generator(0.0, paths, y, z, a + np.swapaxes(a, 1, 2))
        if not np.array_equal(base, moved):
            raise PPDEError(
                ERR_INVALID_PARAM, f"{problem.name} is declared linear but its generator uses z or gamma"
            )


# ---- Zero-sum game ----


def _check_symmetric(gamma: np.ndarray) -> None:
    if np.abs(gamma - np.swapaxes(gamma, -1, -2)).max(initial=0.0) > SYMMETRY_TOLERANCE:
        raise PPDEError(ERR_INVALID_PARAM, "gamma must be symmetric")


def game_running_cost(paths: np.ndarray, grid: TimeGrid, params: GameParams) -> np.ndarray:
    """The running cost ``f(t, w_t, int_0^t w_s ds)`` that makes ``cos`` the exact solution."""
    dim = paths.shape[-1]
    level = paths[..., -1, :].mean(axis=-1)
    phase = level + trapezoid_integral(paths, grid).mean(axis=-1)
    sin, cos = np.sin(phase), np.cos(phase)
    return (
        (level + params.mu_high) * np.maximum(sin, 0.0)
        - (level + params.mu_low) * np.maximum(-sin, 0.0)
        + params.a_low / (2.0 * dim) * np.maximum(cos, 0.0)
        - params.a_high / (2.0 * dim) * np.maximum(-cos, 0.0)
    )


def game_generator(
    t: float,
    paths: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    gamma: np.ndarray,
    grid: TimeGrid,
    params: GameParams,
) -> np.ndarray:
    """Hamiltonian of the game with the lower volatility moved into the simulated process."""
    _check_symmetric(gamma)
    drift_load = z.sum(axis=-1)
    trace = np.trace(gamma, axis1=-2, axis2=-1)
    control = np.minimum(params.mu_low * drift_load, params.mu_high * drift_load) / math.sqrt(params.a_low)
    volatility = np.maximum(params.a_low * trace, params.a_high * trace) / (2.0 * params.a_low)
    return control + volatility + game_running_cost(paths, grid, params) - 0.5 * trace


def game_exact_solution(paths: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """``cos`` of the cross-dimension mean of endpoint plus running integral."""
    paths = np.asarray(paths)
    phase = paths[..., -1, :] + trapezoid_integral(paths, grid)
    return np.cos(phase.mean(axis=-1))


class ControlProblem(ProblemSpec):
    name = "ControlProblem"
    generator_kind = GENERATOR_FULLY_NONLINEAR
    params_type = GameParams

    def __init__(
        self,
        dim: int,
        grid: TimeGrid,
        params: GameParams = GameParams(),
        x0: Optional[Sequence[float]] = None,
    ) -> None:
        super().__init__(dim, grid, x0)
        self.params = params
        self._volatility = math.sqrt(params.a_low)

    def describe(self) -> dict:
        return {**super().describe(), **asdict(self.params)}

    def drift(self, t, paths):
        return np.zeros_like(paths[:, -1, :])

    def diffusion(self, t, paths):
        count = paths.shape[0]
        eye = np.eye(self.dim, dtype=paths.dtype) * self._volatility
        return np.broadcast_to(eye, (count, self.dim, self.dim)).copy()

    def generator(self, t, paths, y, z, gamma):
        return game_generator(t, paths, y, z, gamma, self.grid, self.params)

    def terminal(self, paths):
        return game_exact_solution(paths, self.grid)

    def exact_solution(self, paths: np.ndarray) -> np.ndarray:
        return game_exact_solution(paths, self.grid)


# ---- Options ----


def linear_generator(y: np.ndarray, r0: float) -> np.ndarray:
    """Discounting generator ``-r0 y``."""
    return -r0 * y


def asian_payoff(paths: np.ndarray, grid: TimeGrid, strike: float) -> np.ndarray:
    """``(time average of the basket mean - K)^+`` with the trapezoid rule."""
    average = trapezoid_integral(paths, grid).mean(axis=-1) / grid.horizon
    return np.maximum(average - strike, 0.0)


def barrier_payoff(paths: np.ndarray, strike: float, barrier: float) -> np.ndarray:
    """Up-and-out basket call, monitored on the grid points."""
    paths = np.asarray(paths)
    terminal = paths[..., -1, :].mean(axis=-1)
    alive = running_max_mean(paths) < barrier
    return np.where(alive, np.maximum(terminal - strike, 0.0), 0.0)


class _GbmOption(ProblemSpec):
    generator_kind = GENERATOR_LINEAR
    params_type = OptionParams

    def __init__(
        self,
        dim: int,
        grid: TimeGrid,
        params: OptionParams = OptionParams(),
        x0: Optional[Sequence[float]] = None,
    ) -> None:
        super().__init__(dim, grid, x0)
        self.params = params
        self._rates = params.rate_vector(dim)
        self._sigmas = params.sigma_vector(dim)
        if (self._sigmas <= 0).any():
            raise PPDEError(ERR_INVALID_PARAM, f"{self.name} needs positive volatilities")

    def default_x0(self, dim: int) -> np.ndarray:
        return np.ones(dim)

    def describe(self) -> dict:
        described = asdict(self.params)
        for key in ("rates", "sigmas"):
            if isinstance(described[key], (tuple, list)):
                described[key] = list(described[key])
        return {**super().describe(), **described}

    def drift(self, t, paths):
        last = paths[:, -1, :]
        return last * self._rates.astype(last.dtype)

    def diffusion(self, t, paths):
        last = paths[:, -1, :]
        count = last.shape[0]
        out = np.zeros((count, self.dim, self.dim), dtype=last.dtype)
        diagonal = np.arange(self.dim)
        out[:, diagonal, diagonal] = last * self._sigmas.astype(last.dtype)
        return out

    def generator(self, t, paths, y, z, gamma):
        return linear_generator(y, self.params.r0)


class AsianOption(_GbmOption):
    name = "AsianOption"

    def terminal(self, paths):
        return asian_payoff(paths, self.grid, self.params.strike)


class BarrierOption(_GbmOption):
    name = "BarrierOption"

    def terminal(self, paths):
        return barrier_payoff(paths, self.params.strike, self.params.barrier)


PROBLEMS: Dict[str, Type[ProblemSpec]] = {
    ControlProblem.name: ControlProblem,
    AsianOption.name: AsianOption,
    BarrierOption.name: BarrierOption,
}


def register_problem(name: str, problem_type: Type[ProblemSpec]) -> None:
    """Make a custom problem selectable by name."""
    if not (isinstance(problem_type, type) and issubclass(problem_type, ProblemSpec)):
        raise PPDEError(ERR_INVALID_PARAM, f"{problem_type!r} is not a ProblemSpec subclass")
    PROBLEMS[name] = problem_type


def make_problem(
    name: str, dim: int, grid: TimeGrid, overrides: Optional[dict] = None
) -> ProblemSpec:
    """Instantiate a registered problem; ``overrides`` may set ``x0`` and parameter fields."""
    try:
        problem_type = PROBLEMS[name]
    except KeyError:
        raise PPDEError(
            ERR_INVALID_PARAM, f"unknown problem {name!r}, expected one of {sorted(PROBLEMS)}"
        ) from None

    overrides = dict(overrides or {})
    x0 = overrides.pop("x0", None)
    params_type = getattr(problem_type, "params_type", None)
    if params_type is None:
        if overrides:
            raise PPDEError(ERR_INVALID_PARAM, f"{name} takes no parameters, got {sorted(overrides)}")
        problem = problem_type(dim, grid, x0=x0)
    else:
        known = {f.name for f in fields(params_type)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise PPDEError(ERR_INVALID_PARAM, f"unknown {name} parameters: {unknown}")
        for key in ("rates", "sigmas"):
            if isinstance(overrides.get(key), list):
                overrides[key] = tuple(overrides[key])
        problem = problem_type(dim, grid, params=params_type(**overrides), x0=x0)

    check_problem(problem)
    logger.debug("built problem %s", problem.describe())
    return problem
