"""Dense numeric substrate shared by every solver module.

Matrices are plain ``numpy.ndarray`` values in row-major (C) order. This
module adds what numpy leaves to the caller: a reproducible counter-based
random stream, finiteness checks that report the offending sample, the
summary statistics of a benchmark table and the worker cap read from the
environment.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from deep_ppde.errors import ERR_INVALID_PARAM, ERR_NUMERIC, PPDEError

logger = logging.getLogger(__name__)

PRECISION_F64 = "f64"
PRECISION_F32 = "f32"

_DTYPES = {
    PRECISION_F64: np.float64,
    PRECISION_F32: np.float32,
}

THREADS_ENV = "PPDE_THREADS"

Shape = Union[int, Tuple[int, ...]]


def resolve_dtype(precision: str) -> type:
    """Map a precision mode (``"f64"`` or ``"f32"``) to a numpy dtype."""
    try:
        return _DTYPES[precision]
    except KeyError:
        raise PPDEError(
            ERR_INVALID_PARAM,
            f"unknown precision {precision!r}, expected one of {sorted(_DTYPES)}",
        ) from None


class RngStream:
    """Seeded Philox stream.

    Philox is counter based: a sub-stream is the parent key advanced by a
    fixed number of jumps, so chunks of a simulation can be drawn by
    independent workers and still reproduce the sequential result.

    Example::

        rng = RngStream(7)
        increments = rng.normal((256, 3), stddev=0.1)
        workers = rng.spawn(4)
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise PPDEError(ERR_INVALID_PARAM, f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._bit_generator = np.random.Philox(self.seed)
        self._generator = np.random.Generator(self._bit_generator)

    @classmethod
    def _from_bit_generator(cls, seed: int, bit_generator: np.random.Philox) -> RngStream:
        stream = cls.__new__(cls)
        stream.seed = seed
        stream._bit_generator = bit_generator
        stream._generator = np.random.Generator(bit_generator)
        return stream

    def normal(self, shape: Shape, stddev: float = 1.0, dtype: type = np.float64) -> np.ndarray:
        if stddev < 0:
            raise PPDEError(ERR_INVALID_PARAM, f"stddev must be non-negative, got {stddev}")
        return self._generator.standard_normal(shape, dtype=dtype) * float(stddev)

    def uniform(self, low: float, high: float, shape: Shape, dtype: type = np.float64) -> np.ndarray:
        unit = self._generator.random(shape, dtype=dtype)
        return float(low) + (float(high) - float(low)) * unit

    def spawn(self, count: int) -> List[RngStream]:
        """Return ``count`` independent sub-streams derived from the seed."""
        if count < 0:
            raise PPDEError(ERR_INVALID_PARAM, f"count must be non-negative, got {count}")
        return [
            RngStream._from_bit_generator(self.seed, np.random.Philox(self.seed).jumped(k + 1))
            for k in range(count)
        ]


def gaussian_matrix(
    rng: RngStream, rows: int, cols: int, stddev: float, dtype: type = np.float64
) -> np.ndarray:
    """Draw a ``rows x cols`` matrix of i.i.d. N(0, stddev²) entries."""
    if stddev < 0:
        raise PPDEError(ERR_INVALID_PARAM, f"stddev must be non-negative, got {stddev}")
    if rows < 0 or cols < 0:
        raise PPDEError(ERR_INVALID_PARAM, f"invalid shape ({rows}, {cols})")
    return rng.normal((rows, cols), stddev=stddev, dtype=dtype)


def first_non_finite(values: np.ndarray) -> Optional[int]:
    """Index along axis 0 of the first sample holding a NaN or Inf, if any."""
    values = np.asarray(values)
    if values.ndim == 0:
        return None if np.isfinite(values) else 0
    bad = ~np.isfinite(values.reshape(values.shape[0], -1)).all(axis=1)
    if not bad.any():
        return None
    return int(np.argmax(bad))


def ensure_finite(values: np.ndarray, what: str) -> None:
    """Raise ``ERR_NUMERIC`` naming the first non-finite sample of ``values``."""
    index = first_non_finite(values)
    if index is not None:
        raise PPDEError(ERR_NUMERIC, f"non-finite {what} at sample {index}")


@dataclass(frozen=True)
class SummaryStats:
    """Mean and sample standard deviation of a set of runs."""

    mean: float
    stdev: float


def summary_stats(values: Sequence[float]) -> SummaryStats:
    """Arithmetic mean and n-1 standard deviation."""
    data = np.asarray(values, dtype=np.float64)
    if data.ndim != 1 or data.size < 2:
        raise PPDEError(ERR_INVALID_PARAM, "summary statistics need at least 2 values")
    if not np.isfinite(data).all():
        raise PPDEError(ERR_INVALID_PARAM, "summary statistics need finite values")
    return SummaryStats(mean=float(np.mean(data)), stdev=float(np.std(data, ddof=1)))


def relative_l1_error(estimates: Sequence[float], reference: float) -> float:
    """Mean of ``|estimate - reference| / |reference|``."""
    if reference == 0:
        raise PPDEError(ERR_INVALID_PARAM, "reference value must be non-zero")
    data = np.asarray(estimates, dtype=np.float64)
    if data.size == 0:
        raise PPDEError(ERR_INVALID_PARAM, "estimates are empty")
    return float(np.mean(np.abs(data - reference)) / abs(reference))


def max_workers() -> int:
    """Worker cap from ``PPDE_THREADS`` (defaults to the CPU count)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return os.cpu_count() or 1
    logger.debug("worker cap %s from %s", raw, THREADS_ENV)
    try:
        value = int(raw)
    except ValueError:
        raise PPDEError(ERR_INVALID_PARAM, f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise PPDEError(ERR_INVALID_PARAM, f"{THREADS_ENV} must be at least 1, got {value}")
    return value
