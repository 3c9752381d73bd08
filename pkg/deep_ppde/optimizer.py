"""Adam and the piecewise-constant learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Sequence, Tuple

import numpy as np

from deep_ppde.errors import ERR_INVALID_PARAM, ERR_NUMERIC, ERR_SHAPE_MISMATCH, PPDEError

ADAM_STANDARD = "standard"
ADAM_LITERAL = "paper"
ADAM_MODES = (ADAM_STANDARD, ADAM_LITERAL)

DEFAULT_LR_VALUES = (0.1, 0.01, 0.001)


@dataclass(frozen=True)
class LrSchedule:
    """``values[0]`` below 2P/3, ``values[1]`` below 5P/6, ``values[2]`` after."""

    total_steps: int
    values: Tuple[float, float, float] = DEFAULT_LR_VALUES

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"total steps must be at least 1, got {self.total_steps}")
        if len(self.values) != 3 or not self.values[0] >= self.values[1] >= self.values[2] > 0:
            raise PPDEError(ERR_INVALID_PARAM, f"learning rates must be positive and non-increasing: {self.values}")

    @property
    def boundaries(self) -> Tuple[int, int]:
        return (2 * self.total_steps // 3, 5 * self.total_steps // 6)


def lr_at(schedule: LrSchedule, p: int) -> float:
    """Learning rate of iteration ``p`` (1-based)."""
    total = schedule.total_steps
    if not 1 <= p <= total:
        raise PPDEError(ERR_INVALID_PARAM, f"iteration {p} outside [1, {total}]")
    # integer comparisons: p < 2P/3 and p < 5P/6 without rounding
    if 3 * p < 2 * total:
        return schedule.values[0]
    if 6 * p < 5 * total:
        return schedule.values[1]
    return schedule.values[2]


@dataclass
class AdamState:
    """Moments ``v`` and ``w`` per parameter array and the step counter ``p``.

    ``compat="paper"`` switches to an update that
    divides both moments by ``1 - beta1`` without step powers.
    """

    v: List[np.ndarray] = field(default_factory=list)
    w: List[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    compat: str = ADAM_STANDARD

    @classmethod
    def zeros_like(
        cls,
        params: Sequence[np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        compat: str = ADAM_STANDARD,
    ) -> AdamState:
        if compat not in ADAM_MODES:
            raise PPDEError(ERR_INVALID_PARAM, f"unknown Adam mode {compat!r}")
        return cls(
            v=[np.zeros_like(p) for p in params],
            w=[np.zeros_like(p) for p in params],
            step=0,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            compat=compat,
        )


def adam_step(
    state: AdamState,
    params: Sequence[np.ndarray],
    gradient: Sequence[np.ndarray],
    lr: float,
) -> Tuple[AdamState, List[np.ndarray]]:
    """One Adam update. Inputs are not modified; new arrays are returned."""
    if not lr > 0:
        raise PPDEError(ERR_INVALID_PARAM, f"learning rate must be positive, got {lr}")
    if len(params) != len(gradient) or len(params) != len(state.v):
        raise PPDEError(
            ERR_SHAPE_MISMATCH,
            f"{len(params)} parameter arrays, {len(gradient)} gradients, {len(state.v)} moments",
        )
    for k, (p, g) in enumerate(zip(params, gradient)):
        if p.shape != g.shape:
            raise PPDEError(ERR_SHAPE_MISMATCH, f"gradient {k} shape {g.shape} != {p.shape}")
        if not np.isfinite(g).all():
            raise PPDEError(ERR_NUMERIC, f"non-finite gradient in array {k}")

    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    step = state.step + 1
    if state.compat == ADAM_LITERAL:
        first_correction = second_correction = 1.0 - b1
    else:
        first_correction = 1.0 - b1 ** step
        second_correction = 1.0 - b2 ** step

    new_v, new_w, new_params = [], [], []
    for p, g, v, w in zip(params, gradient, state.v, state.w):
        v = b1 * v + (1.0 - b1) * g
        w = b2 * w + (1.0 - b2) * (g * g)
        v_hat = v / first_correction
        w_hat = w / second_correction
        new_params.append(p - lr * v_hat / (eps + np.sqrt(w_hat)))
        new_v.append(v)
        new_w.append(w)
    return replace(state, v=new_v, w=new_w, step=step), new_params
