"""Reference values: exact game solution, Monte Carlo option oracles, tables.

The option oracles step geometric Brownian motion exactly,
``X_{t+h} = X_t exp((r - sigma^2/2) h + sigma dB)``, while the average and
running maximum of the basket mean stay grid based, so they price the same
discretely monitored payoffs as the solver.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from deep_ppde.errors import ERR_INVALID_PARAM, ERR_IO, PPDEError
from deep_ppde.paths import TimeGrid
from deep_ppde.problems import (
    AsianOption,
    BarrierOption,
    ControlProblem,
    OptionParams,
    ProblemSpec,
    game_exact_solution,
)
from deep_ppde.tensor_core import (
    RngStream,
    max_workers,
    relative_l1_error,
    summary_stats,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class McConfig:
    """Oracle settings. ``workers=None`` uses the ``PPDE_THREADS`` cap."""

    samples: int = 1_000_000
    step: float = 0.01
    seed: int = 0
    antithetic: bool = False
    chunk_size: int = 50_000
    workers: Optional[int] = None

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"samples must be at least 1, got {self.samples}")
        if not self.step > 0:
            raise PPDEError(ERR_INVALID_PARAM, f"step must be positive, got {self.step}")
        if self.chunk_size < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"chunk size must be at least 1, got {self.chunk_size}")
        if self.antithetic and (self.samples % 2 or self.chunk_size % 2):
            raise PPDEError(ERR_INVALID_PARAM, "antithetic sampling needs even samples and chunk size")
        if self.workers is not None and self.workers < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"workers must be at least 1, got {self.workers}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> McConfig:
        return cls(**data)


@dataclass(frozen=True)
class McResult:
    """Sample mean and its standard error (NaN for a single sample)."""

    price: float
    standard_error: float

    def to_dict(self) -> dict:
        return {"price": self.price, "standard_error": self.standard_error}


@dataclass(frozen=True)
class BasketFunctionals:
    """Per-sample functionals of the basket mean ``(1/d) sum_j X^j``."""

    average: np.ndarray
    running_max: np.ndarray
    terminal: np.ndarray
    antithetic: bool = False


def _chunk_sizes(samples: int, chunk_size: int) -> List[int]:
    full, rest = divmod(samples, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def _simulate_chunk(
    rng: RngStream,
    count: int,
    x0: np.ndarray,
    drift: np.ndarray,
    volatility: np.ndarray,
    grid: TimeGrid,
    antithetic: bool,
):
    dim = x0.shape[0]
    x = np.broadcast_to(x0, (count, dim)).copy()
    level = x.mean(axis=1)
    first = level.copy()
    total = level.copy()
    peak = level.copy()
    for _ in range(grid.steps):
        if antithetic:
            half = rng.normal((count // 2, dim))
            shocks = np.empty((count, dim))
            shocks[0::2] = half
            shocks[1::2] = -half
        else:
            shocks = rng.normal((count, dim))
        x = x * np.exp(drift + volatility * shocks)
        level = x.mean(axis=1)
        total += level
        np.maximum(peak, level, out=peak)
    integral = grid.step * (total - 0.5 * (first + level))
    return integral / grid.horizon, peak, level


def simulate_basket_functionals(
    params: OptionParams,
    dim: int,
    horizon: float,
    x0: Optional[Sequence[float]] = None,
    mc: McConfig = McConfig(),
) -> BasketFunctionals:
    """Time average, running max and terminal value of the basket mean per sample.

    Chunk ``k`` draws from sub-stream ``k`` of ``mc.seed`` and results are
    concatenated in chunk order, so the output does not depend on the
    worker count.
    """
    grid = TimeGrid.from_step(horizon, mc.step)
    origin = np.ones(dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    if origin.shape != (dim,):
        raise PPDEError(ERR_INVALID_PARAM, f"x0 must have {dim} entries, got {origin.shape}")
    rates = params.rate_vector(dim)
    sigmas = params.sigma_vector(dim)
    drift = (rates - 0.5 * sigmas * sigmas) * grid.step
    volatility = sigmas * math.sqrt(grid.step)

    sizes = _chunk_sizes(mc.samples, mc.chunk_size)
    streams = RngStream(mc.seed).spawn(len(sizes))
    workers = min(mc.workers or max_workers(), len(sizes))
    logger.debug(
        "oracle: %d samples in %d chunks, %d steps, %d workers", mc.samples, len(sizes), grid.steps, workers
    )

    def run(index: int):
        return _simulate_chunk(streams[index], sizes[index], origin, drift, volatility, grid, mc.antithetic)

    if workers == 1:
        parts = [run(k) for k in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(run, range(len(sizes))))

    return BasketFunctionals(
        average=np.concatenate([p[0] for p in parts]),
        running_max=np.concatenate([p[1] for p in parts]),
        terminal=np.concatenate([p[2] for p in parts]),
        antithetic=mc.antithetic,
    )


def discounted_price(payoffs: np.ndarray, discount: float, antithetic: bool = False) -> McResult:
    """Mean of ``discount * payoffs``; antithetic pairs are averaged for the error."""
    values = discount * np.asarray(payoffs, dtype=np.float64)
    units = values.reshape(-1, 2).mean(axis=1) if antithetic else values
    if units.shape[0] < 2:
        return McResult(price=float(values.mean()), standard_error=math.nan)
    return McResult(
        price=float(values.mean()),
        standard_error=float(units.std(ddof=1) / math.sqrt(units.shape[0])),
    )


def mc_price_asian(
    params: OptionParams,
    dim: int,
    horizon: float,
    x0: Optional[Sequence[float]] = None,
    mc: McConfig = McConfig(),
) -> McResult:
    paths = simulate_basket_functionals(params, dim, horizon, x0, mc)
    payoffs = np.maximum(paths.average - params.strike, 0.0)
    return discounted_price(payoffs, math.exp(-params.r0 * horizon), mc.antithetic)


def mc_price_barrier(
    params: OptionParams,
    dim: int,
    horizon: float,
    x0: Optional[Sequence[float]] = None,
    mc: McConfig = McConfig(),
) -> McResult:
    paths = simulate_basket_functionals(params, dim, horizon, x0, mc)
    payoffs = np.where(
        paths.running_max < params.barrier, np.maximum(paths.terminal - params.strike, 0.0), 0.0
    )
    return discounted_price(payoffs, math.exp(-params.r0 * horizon), mc.antithetic)


def mc_price_vanilla_basket(
    params: OptionParams,
    dim: int,
    horizon: float,
    x0: Optional[Sequence[float]] = None,
    mc: McConfig = McConfig(),
) -> McResult:
    """European call on the terminal basket mean."""
    paths = simulate_basket_functionals(params, dim, horizon, x0, mc)
    payoffs = np.maximum(paths.terminal - params.strike, 0.0)
    return discounted_price(payoffs, math.exp(-params.r0 * horizon), mc.antithetic)


def control_reference(dim: int) -> float:
    """Exact value of the game at the origin."""
    if dim < 1:
        raise PPDEError(ERR_INVALID_PARAM, f"dimension must be at least 1, got {dim}")
    origin = np.zeros((1, 1, dim))
    return float(game_exact_solution(origin, TimeGrid(horizon=1.0, steps=1))[0])


class OracleCache:
    """JSON file of oracle results keyed by problem, parameters and sampling settings."""

    def __init__(self, path: str) -> None:
        self.path = path
        self._entries: Dict[str, dict] = self._load()

    def _load(self) -> Dict[str, dict]:
        if not os.path.exists(self.path):
            return {}
        try:
            with open(self.path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except OSError as exc:
            raise PPDEError(ERR_IO, f"cannot read oracle cache {self.path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise PPDEError(ERR_IO, f"oracle cache {self.path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise PPDEError(ERR_IO, f"oracle cache {self.path} must hold a JSON object")
        return data

    @staticmethod
    def key(problem: ProblemSpec, mc: McConfig) -> str:
        described = dict(problem.describe())
        described["horizon"] = problem.horizon
        return json.dumps(
            {
                "problem": described,
                "seed": mc.seed,
                "samples": mc.samples,
                "step": mc.step,
                "antithetic": mc.antithetic,
            },
            sort_keys=True,
        )

    def get(self, key: str) -> Optional[McResult]:
        entry = self._entries.get(key)
        if entry is None:
            logger.debug("oracle cache miss")
            return None
        logger.debug("oracle cache hit: %s", entry)
        return McResult(price=entry["price"], standard_error=entry["standard_error"])

    def put(self, key: str, result: McResult) -> None:
        self._entries[key] = result.to_dict()
        try:
            with open(self.path, "w", encoding="utf-8") as handle:
                json.dump(self._entries, handle, indent=2, sort_keys=True)
        except OSError as exc:
            raise PPDEError(ERR_IO, f"cannot write oracle cache {self.path}: {exc}") from exc

    def __len__(self) -> int:
        return len(self._entries)


def reference_value(
    problem: ProblemSpec, mc: McConfig = McConfig(), cache: Optional[OracleCache] = None
) -> McResult:
    """Reference value of ``u(0, x0)`` for a registered benchmark problem."""
    if isinstance(problem, ControlProblem):
        origin = problem.x0.reshape(1, 1, -1)
        return McResult(price=float(problem.exact_solution(origin)[0]), standard_error=0.0)

    if isinstance(problem, AsianOption):
        pricer = mc_price_asian
    elif isinstance(problem, BarrierOption):
        pricer = mc_price_barrier
    else:
        raise PPDEError(ERR_INVALID_PARAM, f"no reference value for problem {problem.name!r}")

    key = OracleCache.key(problem, mc) if cache is not None else None
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            return cached
    result = pricer(problem.params, problem.dim, problem.horizon, problem.x0, mc)
    if cache is not None:
        cache.put(key, result)
    return result


@dataclass(frozen=True)
class TableRow:
    """One dimension of a results table."""

    dim: int
    runs: int
    mean: float
    stdev: float
    reference: float
    rel_l1_error: float
    mean_runtime: float

    def to_dict(self) -> dict:
        data = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in data.items()}


def summarize_runs(
    dim: int, estimates: Sequence[float], runtimes: Sequence[float], reference: float
) -> TableRow:
    """Mean, stdev, relative L1 error and mean runtime of the runs of one dimension."""
    if len(estimates) != len(runtimes) or not estimates:
        raise PPDEError(ERR_INVALID_PARAM, "need one runtime per estimate and at least one run")
    if len(estimates) >= 2:
        stats = summary_stats(estimates)
        mean, stdev = stats.mean, stats.stdev
    else:
        mean, stdev = float(estimates[0]), math.nan
    return TableRow(
        dim=dim,
        runs=len(estimates),
        mean=mean,
        stdev=stdev,
        reference=float(reference),
        rel_l1_error=relative_l1_error(estimates, reference),
        mean_runtime=float(np.mean(np.asarray(runtimes, dtype=np.float64))),
    )


def format_table(rows: Sequence[TableRow], title: str = "") -> str:
    """Human-readable table: one line per dimension."""
    header = f"{'d':>5}  {'mean':>12}  {'stdev':>10}  {'ref. value':>12}  {'rel. L1 err':>11}  {'runtime (s)':>11}"
    lines = [title] if title else []
    lines.append(header)
    lines.append("-" * len(header))
    for row in rows:
        lines.append(
            f"{row.dim:>5}  {row.mean:>12.7f}  {row.stdev:>10.2e}  {row.reference:>12.7f}  "
            f"{row.rel_l1_error:>11.2e}  {row.mean_runtime:>11.1f}"
        )
    return "\n".join(lines)
