"""Backward induction solver for path-dependent PDEs.

For ``i = N-1, ..., 0`` the solver regresses the weighted next-step value
``V_{i+1} H_k`` on the path prefix ``(x_0, ..., x_i)``:

    V_N(x) = g(x)
    V_i(x) = Y_i(x) + h F(ih, x, Y_i(x), Z_i(x), Sym(G_i(x)))

Each grid index gets fresh networks (constants at ``i = 0``, where the
prefix is the deterministic point ``x_0``) trained with Adam on batches
simulated anew at every iteration. ``V_{i+1}`` is evaluated in inference
mode so the targets are fixed functions of the simulated paths.

Example::

    config = SchemeConfig(problem="AsianOption", dim=1, steps=10, train_steps=300)
    result = solve(config)
    print(result.v0)
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, Iterator, List, Optional, TextIO, Tuple

import numpy as np

from deep_ppde.errors import (
    ERR_INVALID_PARAM,
    ERR_IO,
    ERR_NUMERIC,
    ERR_SHAPE_MISMATCH,
    ERR_SOLVER_ABORT,
    PPDEError,
)
from deep_ppde.network import (
    ACTIVATION_RELU,
    ACTIVATIONS,
    MODE_INFERENCE,
    MODE_TRAINING,
    BatchNormConfig,
    ForwardCache,
    NetworkParams,
    backward,
    forward,
    gradient_norm,
    xavier_init,
)
from deep_ppde.optimizer import (
    ADAM_MODES,
    ADAM_STANDARD,
    DEFAULT_LR_VALUES,
    AdamState,
    LrSchedule,
    adam_step,
    lr_at,
)
from deep_ppde.paths import IncrementBatch, PathBatch, TimeGrid, euler_step, simulate
from deep_ppde.problems import (
    GENERATOR_FULLY_NONLINEAR,
    GENERATOR_LINEAR,
    ProblemSpec,
    make_problem,
)
from deep_ppde.tensor_core import RngStream, ensure_finite, resolve_dtype
from deep_ppde.weights import (
    TargetBatch,
    compute_weights,
    plain_targets,
    variance_reduced_targets,
)

logger = logging.getLogger(__name__)

SYM_PACKED = "paper"
SYM_FULL = "code"
SYM_MODES = (SYM_PACKED, SYM_FULL)

# Half-width of the uniform initialisation of the time-0 constants.
CONSTANT_INIT_RANGE = 0.05

ProgressCallback = Callable[[int, int, float], None]


@dataclass
class SchemeConfig:
    """Numerical configuration of one solve.

    ``width=None`` means ``dim + 10``. ``runs`` is only read by the
    experiment driver.
    """

    problem: str = "ControlProblem"
    dim: int = 1
    horizon: float = 0.1
    steps: int = 10
    batch: int = 256
    train_steps: int = 900
    width: Optional[int] = None
    hidden_layers: int = 2
    activation: str = ACTIVATION_RELU
    variance_reduction: bool = True
    seed: int = 0
    runs: int = 10
    precision: str = "f64"
    adam_compat: str = ADAM_STANDARD
    sym_compat: str = SYM_PACKED
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    bn_epsilon: float = 1e-6
    bn_momentum: float = 0.99
    lr_values: Tuple[float, float, float] = DEFAULT_LR_VALUES
    problem_params: dict = field(default_factory=dict)

    @property
    def step(self) -> float:
        return self.horizon / self.steps

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(horizon=self.horizon, steps=self.steps)

    @property
    def network_width(self) -> int:
        return self.dim + 10 if self.width is None else self.width

    @property
    def bn(self) -> BatchNormConfig:
        return BatchNormConfig(epsilon=self.bn_epsilon, momentum=self.bn_momentum)

    def validate(self) -> None:
        if self.dim < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"dim must be at least 1, got {self.dim}")
        if self.steps < 1 or not self.horizon > 0:
            raise PPDEError(
                ERR_INVALID_PARAM, f"need steps >= 1 and horizon > 0, got {self.steps}, {self.horizon}"
            )
        if self.batch < 2:
            raise PPDEError(ERR_INVALID_PARAM, f"batch must be at least 2, got {self.batch}")
        if self.train_steps < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"train_steps must be at least 1, got {self.train_steps}")
        if self.hidden_layers < 1 or self.network_width < 1:
            raise PPDEError(ERR_INVALID_PARAM, "networks need at least one hidden layer of width >= 1")
        if self.runs < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"runs must be at least 1, got {self.runs}")
        if self.seed < 0:
            raise PPDEError(ERR_INVALID_PARAM, f"seed must be non-negative, got {self.seed}")
        if self.activation not in ACTIVATIONS:
            raise PPDEError(ERR_INVALID_PARAM, f"unknown activation {self.activation!r}")
        if self.adam_compat not in ADAM_MODES:
            raise PPDEError(ERR_INVALID_PARAM, f"unknown Adam mode {self.adam_compat!r}")
        if self.sym_compat not in SYM_MODES:
            raise PPDEError(ERR_INVALID_PARAM, f"unknown Sym mode {self.sym_compat!r}")
        resolve_dtype(self.precision)
        LrSchedule(self.train_steps, tuple(self.lr_values))
        BatchNormConfig(epsilon=self.bn_epsilon, momentum=self.bn_momentum)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["lr_values"] = list(self.lr_values)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> SchemeConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise PPDEError(ERR_INVALID_PARAM, f"unknown scheme settings: {unknown}")
        values = dict(data)
        if "lr_values" in values:
            values["lr_values"] = tuple(values["lr_values"])
        if values.get("problem_params") is not None:
            values["problem_params"] = dict(values["problem_params"])
        return cls(**values)


class SymLayout:
    """Maps regression outputs to symmetric ``d x d`` matrices.

    ``paper``: ``d(d+1)/2`` outputs; the first ``d(d-1)/2`` fill the
    superdiagonals from the corner inwards (mirrored below), the last ``d``
    give the diagonal doubled. ``code``: ``d*d`` outputs read as a matrix
    ``U`` of which only the upper triangle is used, ``0.5 (U + U^T)``.
    """

    def __init__(self, dim: int, compat: str = SYM_PACKED) -> None:
        if dim < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"dimension must be at least 1, got {dim}")
        if compat not in SYM_MODES:
            raise PPDEError(ERR_INVALID_PARAM, f"unknown Sym mode {compat!r}")
        self.dim = dim
        self.compat = compat
        rows: List[int] = []
        cols: List[int] = []
        coefs: List[float] = []
        if compat == SYM_PACKED:
            for offset in range(dim - 1, 0, -1):
                for r in range(dim - offset):
                    rows.append(r)
                    cols.append(r + offset)
                    coefs.append(1.0)
            for r in range(dim):
                rows.append(r)
                cols.append(r)
                coefs.append(2.0)
        else:
            for r in range(dim):
                for c in range(dim):
                    rows.append(r)
                    cols.append(c)
                    coefs.append(1.0 if r == c else (0.5 if r < c else 0.0))
        self.rows = np.array(rows)
        self.cols = np.array(cols)
        self.coefs = np.array(coefs)
        self._diagonal = self.rows == self.cols

    @property
    def size(self) -> int:
        return len(self.coefs)

    @classmethod
    def for_size(cls, size: int, compat: str = SYM_PACKED) -> SymLayout:
        """Layout whose output count is ``size``."""
        if compat == SYM_FULL:
            dim = math.isqrt(size)
            valid = dim * dim == size
        else:
            dim = (math.isqrt(8 * size + 1) - 1) // 2
            valid = dim * (dim + 1) // 2 == size
        if size < 1 or not valid:
            raise PPDEError(ERR_INVALID_PARAM, f"{size} values do not form a {compat} Sym input")
        return cls(dim, compat)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """``(O, size)`` outputs to ``(O, d, d)`` symmetric matrices."""
        if values.ndim != 2 or values.shape[1] != self.size:
            raise PPDEError(
                ERR_SHAPE_MISMATCH, f"Sym input {values.shape} does not have {self.size} columns"
            )
        count = values.shape[0]
        upper = np.zeros((count, self.dim, self.dim), dtype=values.dtype)
        weighted = values * self.coefs.astype(values.dtype)
        keep = self.coefs != 0
        upper[:, self.rows[keep], self.cols[keep]] = weighted[:, keep]
        out = upper + np.swapaxes(upper, 1, 2)
        diagonal = np.arange(self.dim)
        out[:, diagonal, diagonal] = upper[:, diagonal, diagonal]
        return out

    def pullback(self, sensitivity: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the outputs given the gradient w.r.t. the matrix."""
        if sensitivity.shape[1:] != (self.dim, self.dim):
            raise PPDEError(
                ERR_SHAPE_MISMATCH, f"sensitivity {sensitivity.shape} is not (O, {self.dim}, {self.dim})"
            )
        direct = sensitivity[:, self.rows, self.cols]
        mirrored = sensitivity[:, self.cols, self.rows]
        combined = np.where(self._diagonal, direct, direct + mirrored)
        return combined * self.coefs.astype(sensitivity.dtype)


def sym(values, compat: str = SYM_PACKED) -> np.ndarray:
    """Symmetric matrix of one output vector; ``d`` follows from its length."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 1:
        raise PPDEError(ERR_INVALID_PARAM, f"Sym takes a vector, got shape {array.shape}")
    layout = SymLayout.for_size(array.shape[0], compat)
    return layout.apply(array[None, :])[0]


def regressor_sizes(problem: ProblemSpec, layout: SymLayout) -> Dict[str, int]:
    """Output size per regressed object, in training order."""
    sizes = {"y": 1}
    if problem.needs_z:
        sizes["z"] = problem.dim
    if problem.needs_gamma:
        sizes["g"] = layout.size
    return sizes


@dataclass
class StepModels:
    """Regressors of one grid index: networks, or constants at index 0."""

    index: int
    networks: Dict[str, NetworkParams] = field(default_factory=dict)
    constants: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def keys(self) -> Tuple[str, ...]:
        return tuple(self.constants) if self.constants else tuple(self.networks)

    @property
    def input_dim(self) -> Optional[int]:
        if not self.networks:
            return None
        return next(iter(self.networks.values())).input_dim

    def trainable(self) -> List[np.ndarray]:
        if self.constants:
            return [self.constants[k] for k in self.keys]
        arrays: List[np.ndarray] = []
        for key in self.keys:
            arrays.extend(self.networks[key].trainable())
        return arrays

    def with_trainable(self, arrays: List[np.ndarray]) -> StepModels:
        if self.constants:
            if len(arrays) != len(self.constants):
                raise PPDEError(ERR_SHAPE_MISMATCH, f"expected {len(self.constants)} arrays, got {len(arrays)}")
            return StepModels(self.index, constants=dict(zip(self.keys, arrays)))
        networks = {}
        offset = 0
        for key in self.keys:
            count = len(self.networks[key].trainable())
            networks[key] = self.networks[key].with_trainable(list(arrays[offset: offset + count]))
            offset += count
        if offset != len(arrays):
            raise PPDEError(ERR_SHAPE_MISMATCH, f"expected {offset} arrays, got {len(arrays)}")
        return StepModels(self.index, networks=networks)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for key in self.keys:
            if self.constants:
                digest.update(np.ascontiguousarray(self.constants[key]).tobytes())
            else:
                digest.update(self.networks[key].checksum().encode("ascii"))
        return digest.hexdigest()


def init_step_models(
    index: int,
    problem: ProblemSpec,
    config: SchemeConfig,
    layout: SymLayout,
    rng: RngStream,
) -> StepModels:
    """Fresh regressors for grid index ``index`` on input dimension ``(index+1) d``."""
    dtype = resolve_dtype(config.precision)
    sizes = regressor_sizes(problem, layout)
    if index == 0:
        return StepModels(
            index,
            constants={
                key: rng.uniform(-CONSTANT_INIT_RANGE, CONSTANT_INIT_RANGE, size, dtype=dtype)
                for key, size in sizes.items()
            },
        )
    input_dim = (index + 1) * problem.dim
    return StepModels(
        index,
        networks={
            key: xavier_init(
                rng, input_dim, size, config.hidden_layers, config.network_width,
                config.activation, dtype,
            )
            for key, size in sizes.items()
        },
    )


def evaluate_models(
    models: StepModels, inputs: np.ndarray, mode: str, bn: BatchNormConfig
) -> Tuple[Dict[str, np.ndarray], Dict[str, ForwardCache], StepModels]:
    """Outputs per regressor, backprop caches and the models after the pass."""
    count = inputs.shape[0]
    if models.constants:
        outputs = {
            key: np.broadcast_to(value, (count, value.shape[0])).copy()
            for key, value in models.constants.items()
        }
        return outputs, {}, models
    outputs, caches, networks = {}, {}, {}
    for key, params in models.networks.items():
        result = forward(params, inputs, mode, bn)
        outputs[key] = result.outputs
        caches[key] = result.cache
        networks[key] = result.params
    return outputs, caches, StepModels(models.index, networks=networks)


def model_gradients(
    models: StepModels,
    caches: Dict[str, ForwardCache],
    sensitivities: Dict[str, np.ndarray],
) -> List[np.ndarray]:
    """Gradients aligned with ``models.trainable()``."""
    if models.constants:
        return [sensitivities[key].sum(axis=0) for key in models.keys]
    grads: List[np.ndarray] = []
    for key in models.keys:
        grads.extend(backward(models.networks[key], caches[key], sensitivities[key]))
    return grads


def assemble_v_hat(
    i: int,
    paths: np.ndarray,
    y: np.ndarray,
    z: Optional[np.ndarray],
    gamma_sym: Optional[np.ndarray],
    problem: ProblemSpec,
) -> np.ndarray:
    """``y + h F(ih, x, y, z, gamma)``; at the terminal index just ``g(x)``."""
    grid = problem.grid
    if i == grid.steps:
        return problem.terminal(paths)
    if paths.shape[1] != i + 1:
        raise PPDEError(ERR_SHAPE_MISMATCH, f"index {i} needs {i + 1} path points, got {paths.shape[1]}")
    if y.shape != (paths.shape[0],):
        raise PPDEError(ERR_SHAPE_MISMATCH, f"y shape {y.shape} != ({paths.shape[0]},)")
    generator = problem.generator(
        grid.time(i),
        paths,
        y,
        z if problem.needs_z else None,
        gamma_sym if problem.needs_gamma else None,
    )
    ensure_finite(generator, "generator")
    return y + grid.step * generator


@dataclass(frozen=True)
class StepLoss:
    """Mean squared error and its derivatives w.r.t. the raw outputs."""

    loss: float
    dy: np.ndarray
    dz: Optional[np.ndarray] = None
    dg: Optional[np.ndarray] = None


def step_loss(
    targets: TargetBatch,
    y_out: np.ndarray,
    z_out: Optional[np.ndarray] = None,
    g_out: Optional[np.ndarray] = None,
    layout: Optional[SymLayout] = None,
) -> StepLoss:
    """Batch mean of ``|y - Y|^2 + |z - Z|^2 + |Sym(g) - G|_F^2`` over the regressed terms."""
    if y_out.shape != targets.y.shape:
        raise PPDEError(ERR_SHAPE_MISMATCH, f"y output {y_out.shape} != target {targets.y.shape}")
    count = y_out.shape[0]
    residual = y_out - targets.y
    loss = float(np.mean(residual * residual))
    dy = 2.0 * residual / count

    dz = dg = None
    if targets.has_z:
        if z_out is None or z_out.shape != targets.z.shape:
            raise PPDEError(ERR_SHAPE_MISMATCH, "z output does not match its target")
        residual = z_out - targets.z
        loss += float(np.mean(np.sum(residual * residual, axis=1)))
        dz = 2.0 * residual / count
    if targets.has_g:
        if g_out is None or layout is None:
            raise PPDEError(ERR_SHAPE_MISMATCH, "gamma target given without gamma outputs and layout")
        residual = layout.apply(g_out) - targets.g
        loss += float(np.mean(np.sum(residual * residual, axis=(1, 2))))
        dg = layout.pullback(2.0 * residual / count)
    return StepLoss(loss=loss, dy=dy, dz=dz, dg=dg)


@dataclass
class SolverResult:
    """Estimate of ``u(0, x0)`` with per-step final losses keyed by grid index."""

    v0: float
    losses: Dict[int, float]
    runtime: float
    seed: int
    config: dict

    def to_dict(self) -> dict:
        return {
            "v0": self.v0,
            "losses": {str(k): v for k, v in sorted(self.losses.items())},
            "runtime": self.runtime,
            "seed": self.seed,
            "config": self.config,
        }


@contextmanager
def _abort_on_numeric(step: int, iteration: int) -> Iterator[None]:
    try:
        yield
    except PPDEError as exc:
        if exc.code != ERR_NUMERIC:
            raise
        raise PPDEError(ERR_SOLVER_ABORT, f"step {step}, iteration {iteration}: {exc.message}") from exc


class PPDESolver:
    """Trains the regressors of every grid index, last index first.

    Example::

        solver = PPDESolver(SchemeConfig(problem="BarrierOption", train_steps=300))
        solver.set_loss_trace("losses.jsonl")
        result = solver.solve()
    """

    def __init__(self, config: SchemeConfig, problem: Optional[ProblemSpec] = None) -> None:
        config.validate()
        self.config = config
        grid = config.grid
        if problem is None:
            problem = make_problem(config.problem, config.dim, grid, config.problem_params)
        elif problem.dim != config.dim or problem.grid != grid:
            raise PPDEError(
                ERR_INVALID_PARAM, "problem dimension or grid does not match the configuration"
            )
        self.problem = problem
        self.grid = grid
        self.dtype = resolve_dtype(config.precision)
        self.layout = SymLayout(problem.dim, config.sym_compat)
        self.bn = config.bn
        self.models: Dict[int, StepModels] = {}

        self._loss_trace_path: Optional[str] = None
        self._log_every = 100
        self._on_progress: Optional[ProgressCallback] = None

    def set_loss_trace(self, path: Optional[str]) -> None:
        """Append ``{step, iteration, loss, lr}`` JSON lines to ``path`` while training."""
        self._loss_trace_path = path

    def set_log_every(self, iterations: int) -> None:
        if iterations < 1:
            raise PPDEError(ERR_INVALID_PARAM, f"log interval must be at least 1, got {iterations}")
        self._log_every = iterations

    def set_progress_callback(self, callback: Optional[ProgressCallback]) -> None:
        """``callback(step, iteration, loss)`` after every optimizer update."""
        self._on_progress = callback

    def value_at(self, index: int, paths: PathBatch) -> np.ndarray:
        """``V_index`` on the first ``index + 1`` points of ``paths``."""
        prefix = paths.values[:, : index + 1, :]
        if index == self.grid.steps:
            return assemble_v_hat(index, prefix, None, None, None, self.problem)
        models = self.models.get(index)
        if models is None:
            raise PPDEError(ERR_INVALID_PARAM, f"grid index {index} has not been trained")
        outputs, _, _ = evaluate_models(models, paths.flat(index + 1), MODE_INFERENCE, self.bn)
        return self._assemble(index, prefix, outputs)

    def _assemble(self, index: int, prefix: np.ndarray, outputs: Dict[str, np.ndarray]) -> np.ndarray:
        gamma = self.layout.apply(outputs["g"]) if "g" in outputs else None
        return assemble_v_hat(index, prefix, outputs["y"][:, 0], outputs.get("z"), gamma, self.problem)

    def train_step_i(
        self, i: int, rng: RngStream, trace: Optional[TextIO] = None
    ) -> Tuple[StepModels, float]:
        """Train the regressors of grid index ``i`` against the frozen ``V_{i+1}``."""
        config = self.config
        problem = self.problem
        if not 0 <= i < self.grid.steps:
            raise PPDEError(ERR_INVALID_PARAM, f"grid index {i} outside [0, {self.grid.steps})")
        if i + 1 < self.grid.steps and i + 1 not in self.models:
            raise PPDEError(ERR_INVALID_PARAM, f"grid index {i + 1} must be trained before {i}")

        models = init_step_models(i, problem, config, self.layout, rng)
        state = AdamState.zeros_like(
            models.trainable(), config.adam_beta1, config.adam_beta2, config.adam_epsilon,
            config.adam_compat,
        )
        schedule = LrSchedule(config.train_steps, tuple(config.lr_values))
        need_z = problem.needs_z
        need_g = problem.needs_gamma

        loss = math.nan
        for p in range(1, config.train_steps + 1):
            with _abort_on_numeric(i, p):
                paths, increments = simulate(
                    problem.x0, problem.drift, problem.diffusion, self.grid,
                    config.batch, i + 1, rng, self.dtype,
                )
                v_next = self.value_at(i + 1, paths)
                weights = compute_weights(increments, self.grid.step)
                outputs, caches, models = evaluate_models(
                    models, paths.flat(i + 1), MODE_TRAINING, self.bn
                )
                y_out = outputs["y"][:, 0]
                if config.variance_reduction:
                    targets = variance_reduced_targets(
                        v_next, y_out, outputs.get("z"), increments, weights, need_z, need_g
                    )
                else:
                    targets = plain_targets(v_next, weights, need_z, need_g)
                result = step_loss(targets, y_out, outputs.get("z"), outputs.get("g"), self.layout)

            loss = result.loss
            if not math.isfinite(loss):
                raise PPDEError(ERR_SOLVER_ABORT, f"non-finite loss at step {i}, iteration {p}")

            sensitivities = {"y": result.dy[:, None], "z": result.dz, "g": result.dg}
            grads = model_gradients(models, caches, sensitivities)
            lr = lr_at(schedule, p)
            with _abort_on_numeric(i, p):
                state, arrays = adam_step(state, models.trainable(), grads, lr)
            models = models.with_trainable(arrays)

            if trace is not None:
                trace.write(json.dumps({"step": i, "iteration": p, "loss": loss, "lr": lr}) + "\n")
            if p % self._log_every == 0:
                logger.debug(
                    "step %d iteration %d: loss=%.6e lr=%g grad_norm=%.3e",
                    i, p, loss, lr, gradient_norm(grads) or 0.0,
                )
            if self._on_progress is not None:
                self._on_progress(i, p, loss)

        return models, loss

    def solve(self) -> SolverResult:
        config = self.config
        started = time.perf_counter()
        self.models = {}
        streams = RngStream(config.seed).spawn(self.grid.steps)
        losses: Dict[int, float] = {}

        trace = self._open_trace()
        try:
            for i in range(self.grid.steps - 1, -1, -1):
                step_started = time.perf_counter()
                models, loss = self.train_step_i(i, streams[i], trace)
                self.models[i] = models
                losses[i] = loss
                logger.info(
                    "trained step %d/%d: loss=%.6e (%.2fs)",
                    i, self.grid.steps - 1, loss, time.perf_counter() - step_started,
                )
        finally:
            if trace is not None:
                trace.close()

        v0 = self._value_at_origin()
        runtime = time.perf_counter() - started
        logger.info("v0=%.7f seed=%d runtime=%.2fs", v0, config.seed, runtime)
        return SolverResult(
            v0=v0, losses=losses, runtime=runtime, seed=config.seed, config=config.to_dict()
        )

    def _value_at_origin(self) -> float:
        constants = self.models[0].constants
        outputs = {key: value[None, :] for key, value in constants.items()}
        origin = PathBatch.start(self.problem.x0, 1, self.grid, dtype=self.dtype).values
        value = self._assemble(0, origin, outputs)
        if not np.isfinite(value).all():
            raise PPDEError(ERR_NUMERIC, "non-finite estimate of v0")
        return float(value[0])

    def _open_trace(self) -> Optional[TextIO]:
        if self._loss_trace_path is None:
            return None
        try:
            return open(self._loss_trace_path, "a", encoding="utf-8")
        except OSError as exc:
            raise PPDEError(ERR_IO, f"cannot open loss trace {self._loss_trace_path}: {exc}") from exc


def solve(config: SchemeConfig, problem: Optional[ProblemSpec] = None) -> SolverResult:
    """Run the full backward sweep and return the estimate of ``u(0, x0)``."""
    return PPDESolver(config, problem).solve()


def apply_scheme_operator(
    problem: ProblemSpec,
    prefix: np.ndarray,
    value_fn: Callable[[np.ndarray], np.ndarray],
    samples: int,
    rng: RngStream,
    variance_reduced: bool = False,
) -> float:
    """One step of the discrete scheme at a single path prefix, by plain Monte Carlo.

    ``value_fn`` maps ``(samples, i+2, d)`` extended paths to the next-step
    values. The conditional expectations are sample means over ``samples``
    Brownian increments; no network is involved.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim != 2 or prefix.shape[1] != problem.dim:
        raise PPDEError(ERR_SHAPE_MISMATCH, f"prefix must be (i+1, {problem.dim}), got {prefix.shape}")
    if samples < 2:
        raise PPDEError(ERR_INVALID_PARAM, f"need at least 2 samples, got {samples}")
    grid = problem.grid
    index = prefix.shape[0] - 1
    h = grid.step
    start = PathBatch(values=np.repeat(prefix[None, :, :], samples, axis=0), grid=grid)
    t = grid.time(index)
    increments = IncrementBatch(values=rng.normal((samples, problem.dim), stddev=math.sqrt(h)), step=h)
    paths = euler_step(start, problem.drift(t, start.values), problem.diffusion(t, start.values), increments)

    values = np.asarray(value_fn(paths.values), dtype=np.float64)
    ensure_finite(values, "next-step value")
    weights = compute_weights(increments, h)
    y = float(values.mean())
    if variance_reduced:
        residual = values - y
        z = np.mean(residual[:, None] * weights.h1, axis=0)
        second = residual - increments.values @ z
        gamma = np.mean(second[:, None, None] * weights.h2, axis=0)
    else:
        z = np.mean(values[:, None] * weights.h1, axis=0)
        gamma = np.mean(values[:, None, None] * weights.h2, axis=0)
    gamma = 0.5 * (gamma + gamma.T)

    if problem.generator_kind == GENERATOR_LINEAR:
        z_arg = gamma_arg = None
    else:
        z_arg = z[None, :]
        gamma_arg = gamma[None, :, :] if problem.generator_kind == GENERATOR_FULLY_NONLINEAR else None
    result = assemble_v_hat(index, prefix[None, :, :], np.array([y]), z_arg, gamma_arg, problem)
    return float(result[0])
