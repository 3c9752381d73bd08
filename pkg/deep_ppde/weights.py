"""Monte Carlo weights (H0, H1, H2) and regression targets.

For a Brownian increment ``B_h``::

    H0 = 1,  H1 = B_h / h,  H2 = (B_h B_h^T - h I) / h^2

so that ``E[phi(x + sigma B_h) H_k]`` recovers the value, ``sigma^T`` times
the gradient and ``sigma^T Hess sigma`` of a smooth ``phi``. No inverse
diffusion is applied: the regressed z and gamma live in the scaled
coordinates the generators expect.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from deep_ppde.errors import ERR_INVALID_PARAM, ERR_SHAPE_MISMATCH, PPDEError
from deep_ppde.paths import IncrementBatch
from deep_ppde.tensor_core import ensure_finite

# Enumeration limits of the exact oracle.
MAX_ORACLE_SUPPORT = 32
MAX_ORACLE_DIM = 2


@dataclass(frozen=True)
class WeightTriple:
    """Per-sample weights: ``h0`` (O,), ``h1`` (O, d), ``h2`` (O, d, d)."""

    h0: np.ndarray
    h1: np.ndarray
    h2: np.ndarray


@dataclass(frozen=True)
class TargetBatch:
    """Regression targets of one training iteration.

    ``z`` and ``g`` are ``None`` when the generator does not use them.
    """

    y: np.ndarray
    z: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None

    @property
    def has_z(self) -> bool:
        return self.z is not None

    @property
    def has_g(self) -> bool:
        return self.g is not None


def compute_weights(increments: IncrementBatch, h: float) -> WeightTriple:
    if not h > 0:
        raise PPDEError(ERR_INVALID_PARAM, f"step must be positive, got {h}")
    db = increments.values
    count, dim = db.shape
    outer = db[:, :, None] * db[:, None, :]
    diagonal = np.arange(dim)
    outer[:, diagonal, diagonal] -= h
    return WeightTriple(
        h0=np.ones(count, dtype=db.dtype),
        h1=db / h,
        h2=outer / (h * h),
    )


def plain_targets(
    v_next: np.ndarray, weights: WeightTriple, need_z: bool, need_g: bool
) -> TargetBatch:
    """Targets ``V H0``, ``V H1``, ``V H2``."""
    ensure_finite(v_next, "next-step value")
    _check_batch(v_next, weights)
    return TargetBatch(
        y=v_next * weights.h0,
        z=v_next[:, None] * weights.h1 if need_z else None,
        g=v_next[:, None, None] * weights.h2 if need_g else None,
    )


def variance_reduced_targets(
    v_next: np.ndarray,
    y_now: Optional[np.ndarray],
    z_now: Optional[np.ndarray],
    increments: IncrementBatch,
    weights: WeightTriple,
    need_z: bool,
    need_g: bool,
) -> TargetBatch:
    """Targets with the current Y and Z outputs as control variates.

    ``y_now`` and ``z_now`` are plain arrays: no sensitivity flows back
    through them.
    """
    ensure_finite(v_next, "next-step value")
    _check_batch(v_next, weights)
    if (need_z or need_g) and y_now is None:
        raise PPDEError(ERR_INVALID_PARAM, "variance-reduced targets need the current Y output")
    if need_g and z_now is None:
        raise PPDEError(ERR_INVALID_PARAM, "variance-reduced gamma target needs the current Z output")

    z_target = g_target = None
    if need_z or need_g:
        residual = v_next - y_now
        if need_z:
            z_target = residual[:, None] * weights.h1
        if need_g:
            if z_now.shape != increments.values.shape:
                raise PPDEError(
                    ERR_SHAPE_MISMATCH, f"z shape {z_now.shape} != {increments.values.shape}"
                )
            second = residual - np.sum(z_now * increments.values, axis=1)
            g_target = second[:, None, None] * weights.h2
    return TargetBatch(y=v_next * weights.h0, z=z_target, g=g_target)


def _check_batch(v_next: np.ndarray, weights: WeightTriple) -> None:
    if v_next.shape != weights.h0.shape:
        raise PPDEError(
            ERR_SHAPE_MISMATCH, f"value shape {v_next.shape} != weight batch {weights.h0.shape}"
        )


@dataclass(frozen=True)
class DiscreteNoise:
    """Finite distribution over increment values ``support`` (K, d)."""

    support: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self) -> None:
        if self.support.ndim != 2 or self.probabilities.shape != (self.support.shape[0],):
            raise PPDEError(ERR_SHAPE_MISMATCH, "support must be (K, d) with K probabilities")
        if abs(float(self.probabilities.sum()) - 1.0) > 1e-12 or (self.probabilities < 0).any():
            raise PPDEError(ERR_INVALID_PARAM, "probabilities must be non-negative and sum to 1")

    @classmethod
    def two_point(cls, h: float, dim: int) -> DiscreteNoise:
        """Independent ``+-sqrt(h)`` coordinates: exact mean 0 and variance ``h``."""
        root = math.sqrt(h)
        support = np.array(list(itertools.product((-root, root), repeat=dim)), dtype=np.float64)
        return cls(support=support, probabilities=np.full(len(support), 1.0 / len(support)))


@dataclass(frozen=True)
class OracleMoments:
    """Exact ``E[phi H0]``, ``E[phi H1]`` (d,), ``E[phi H2]`` (d, d)."""

    y: float
    z: np.ndarray
    g: np.ndarray


def conditional_expectation_oracle(
    phi: Callable[[np.ndarray], np.ndarray],
    noise: DiscreteNoise,
    h: float,
    x0: Optional[np.ndarray] = None,
) -> OracleMoments:
    """Enumerate ``noise`` to get the weighted moments of ``phi(x0 + B)``."""
    count, dim = noise.support.shape
    if count > MAX_ORACLE_SUPPORT:
        raise PPDEError(
            ERR_INVALID_PARAM, f"noise support {count} exceeds {MAX_ORACLE_SUPPORT} points"
        )
    if dim > MAX_ORACLE_DIM:
        raise PPDEError(ERR_INVALID_PARAM, f"oracle supports d <= {MAX_ORACLE_DIM}, got {dim}")
    origin = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    values = np.asarray(phi(origin + noise.support), dtype=np.float64)
    weights = compute_weights(IncrementBatch(values=noise.support.copy(), step=h), h)
    p = noise.probabilities
    return OracleMoments(
        y=float(np.sum(p * values)),
        z=np.einsum("k,k,kj->j", p, values, weights.h1),
        g=np.einsum("k,k,kij->ij", p, values, weights.h2),
    )


@dataclass(frozen=True)
class MomentEstimate:
    """Sample moments of ``V H_k`` with their standard errors."""

    y: float
    z: np.ndarray
    g: np.ndarray
    y_stderr: float
    z_stderr: np.ndarray
    g_stderr: np.ndarray


def sample_moments(values: np.ndarray, weights: WeightTriple) -> MomentEstimate:
    """Monte Carlo estimates of ``E[V H0]``, ``E[V H1]``, ``E[V H2]``."""
    _check_batch(values, weights)
    count = values.shape[0]
    if count < 2:
        raise PPDEError(ERR_INVALID_PARAM, "sample moments need at least 2 samples")
    first = values * weights.h0
    second = values[:, None] * weights.h1
    third = values[:, None, None] * weights.h2
    root = math.sqrt(count)
    return MomentEstimate(
        y=float(first.mean()),
        z=second.mean(axis=0),
        g=third.mean(axis=0),
        y_stderr=float(first.std(ddof=1) / root),
        z_stderr=second.std(axis=0, ddof=1) / root,
        g_stderr=third.std(axis=0, ddof=1) / root,
    )
