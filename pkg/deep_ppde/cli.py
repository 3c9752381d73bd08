"""Experiment driver: sweep dimensions and seeded runs, write CSV and summaries.

Usage::

    deep-ppde --problem AsianOption --dims 1 10 --runs 10 --out-csv asian.csv
    python -m deep_ppde --config experiment.json --train-steps 300 -v

Settings are resolved as defaults < JSON ``--config`` file < flags. The
config file uses the flag names with underscores (``train_steps``,
``out_csv``, ...) and may also carry ``problem_params``, ``width`` and
``hidden_layers``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

from deep_ppde import __version__
from deep_ppde.errors import ERR_IO, ERR_SOLVER_ABORT, ERR_USAGE, PPDEError
from deep_ppde.optimizer import ADAM_MODES
from deep_ppde.paths import TimeGrid
from deep_ppde.problems import PROBLEMS, make_problem
from deep_ppde.reference import (
    McConfig,
    OracleCache,
    TableRow,
    format_table,
    reference_value,
    summarize_runs,
)
from deep_ppde.scheme import SYM_MODES, PPDESolver, SchemeConfig, SolverResult
from deep_ppde.tensor_core import PRECISION_F32, PRECISION_F64, max_workers

logger = logging.getLogger(__name__)

CSV_HEADER = ["d", "T", "N", "run", "y0", "runtime"]

EXIT_OK = 0
EXIT_SOLVER_ABORT = 1
EXIT_USAGE = 2

# Config-file keys that are SchemeConfig fields.
_SCHEME_KEYS = (
    "problem",
    "runs",
    "batch",
    "train_steps",
    "seed",
    "variance_reduction",
    "precision",
    "adam_compat",
    "sym_compat",
    "width",
    "hidden_layers",
    "problem_params",
)
_EXPERIMENT_KEYS = ("dims", "out_csv", "out_json", "loss_trace", "parallel_runs", "oracle_cache")
_GRID_KEYS = ("h", "T")
_ORACLE_KEYS = ("oracle_samples",)


@dataclass
class ExperimentConfig:
    """A dimension sweep of seeded runs plus the oracle and output settings."""

    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    dims: List[int] = field(default_factory=lambda: [1, 10, 100])
    oracle: McConfig = field(default_factory=McConfig)
    out_csv: str = "results.csv"
    out_json: Optional[str] = None
    loss_trace: Optional[str] = None
    oracle_cache: Optional[str] = None
    parallel_runs: bool = False

    @property
    def problem(self) -> str:
        return self.scheme.problem

    @property
    def runs(self) -> int:
        return self.scheme.runs

    def validate(self) -> None:
        if not self.dims or any(d < 1 for d in self.dims):
            raise PPDEError(ERR_USAGE, f"dimensions must all be at least 1, got {self.dims}")
        if self.scheme.problem not in PROBLEMS:
            raise PPDEError(
                ERR_USAGE, f"unknown problem {self.scheme.problem!r}, expected one of {sorted(PROBLEMS)}"
            )
        try:
            self.scheme.validate()
        except PPDEError as exc:
            raise PPDEError(ERR_USAGE, exc.message) from exc

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "dims": list(self.dims),
            "oracle": self.oracle.to_dict(),
            "out_csv": self.out_csv,
            "out_json": self.out_json,
            "loss_trace": self.loss_trace,
            "oracle_cache": self.oracle_cache,
            "parallel_runs": self.parallel_runs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        return cls(
            scheme=SchemeConfig.from_dict(data.get("scheme", {})),
            dims=list(data.get("dims", [1, 10, 100])),
            oracle=McConfig.from_dict(data.get("oracle", {})),
            out_csv=data.get("out_csv", "results.csv"),
            out_json=data.get("out_json"),
            loss_trace=data.get("loss_trace"),
            oracle_cache=data.get("oracle_cache"),
            parallel_runs=bool(data.get("parallel_runs", False)),
        )


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deep-ppde", description="Deep backward scheme for path-dependent PDEs."
    )
    parser.add_argument("--problem", choices=sorted(PROBLEMS), help="Benchmark problem.")
    parser.add_argument("--dims", type=int, nargs="+", help="Dimensions to sweep (default 1 10 100).")
    parser.add_argument("--runs", type=int, help="Seeded runs per dimension (default 10).")
    parser.add_argument("--batch", type=int, help="Batch size O (default 256).")
    parser.add_argument("--train-steps", type=int, help="Optimizer iterations P per grid index (default 900).")
    parser.add_argument("--h", type=float, help="Time step (default 0.01).")
    parser.add_argument("--T", type=float, help="Horizon (default 0.1).")
    parser.add_argument("--seed", type=int, help="Seed of run 0; run r uses seed + r (default 0).")
    parser.add_argument(
        "--no-variance-reduction", dest="variance_reduction", action="store_const", const=False,
        help="Use the plain regression targets.",
    )
    parser.add_argument("--precision", choices=[PRECISION_F64, PRECISION_F32])
    parser.add_argument("--adam-compat", choices=list(ADAM_MODES))
    parser.add_argument("--sym-compat", choices=list(SYM_MODES))
    parser.add_argument("--out-csv", help="Per-run CSV (default results.csv).")
    parser.add_argument("--out-json", help="JSON summary.")
    parser.add_argument("--loss-trace", help="JSON lines loss trace; one file per dimension and run.")
    parser.add_argument("--config", help="JSON file with default settings.")
    parser.add_argument(
        "--parallel-runs", dest="parallel_runs", action="store_const", const=True,
        help="Run the seeds of one dimension concurrently.",
    )
    parser.add_argument("--oracle-samples", type=int, help="Monte Carlo samples of the reference oracle.")
    parser.add_argument("--oracle-cache", help="JSON file caching oracle results.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        raise PPDEError(ERR_USAGE, f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise PPDEError(ERR_USAGE, f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise PPDEError(ERR_USAGE, f"config file {path} must hold a JSON object")
    known = set(_SCHEME_KEYS) | set(_EXPERIMENT_KEYS) | set(_GRID_KEYS) | set(_ORACLE_KEYS)
    unknown = sorted(set(data) - known)
    if unknown:
        raise PPDEError(ERR_USAGE, f"unknown config keys in {path}: {unknown}")
    return data


def parse_config(argv: Optional[Sequence[str]] = None) -> ExperimentConfig:
    """Resolve an :class:`ExperimentConfig` from flags and an optional config file."""
    return config_from_args(build_arg_parser().parse_args(argv))


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    settings: Dict[str, object] = {"h": 0.01, "T": 0.1}
    if args.config:
        settings.update(_load_config_file(args.config))
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "verbose"):
            settings[key] = value

    try:
        grid = TimeGrid.from_step(float(settings["T"]), float(settings["h"]))
    except PPDEError as exc:
        raise PPDEError(ERR_USAGE, exc.message) from exc

    scheme_values = {key: settings[key] for key in _SCHEME_KEYS if key in settings}
    oracle_values = {"samples": int(settings["oracle_samples"])} if "oracle_samples" in settings else {}
    try:
        scheme = SchemeConfig(horizon=grid.horizon, steps=grid.steps, **scheme_values)
        oracle = McConfig(step=grid.step, **oracle_values)
    except (PPDEError, TypeError) as exc:
        raise PPDEError(ERR_USAGE, str(getattr(exc, "message", exc))) from exc

    config = ExperimentConfig(
        scheme=scheme,
        dims=[int(d) for d in settings.get("dims", [1, 10, 100])],
        oracle=oracle,
        out_csv=str(settings.get("out_csv", "results.csv")),
        out_json=settings.get("out_json"),
        loss_trace=settings.get("loss_trace"),
        oracle_cache=settings.get("oracle_cache"),
        parallel_runs=bool(settings.get("parallel_runs", False)),
    )
    config.validate()
    return config


@dataclass(frozen=True)
class CsvRow:
    d: int
    T: float
    N: int
    run: int
    y0: float
    runtime: float

    def fields(self) -> List[str]:
        # y0 keeps full precision so summaries can be recomputed from the file
        return [
            str(self.d), repr(float(self.T)), str(self.N), str(self.run),
            repr(float(self.y0)), f"{self.runtime:.3f}",
        ]


def write_csv(rows: Sequence[CsvRow], path: str) -> None:
    """Write the header and ``rows``, replacing ``path``."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in rows:
                writer.writerow(row.fields())
    except OSError as exc:
        raise PPDEError(ERR_IO, f"cannot write {path}: {exc}") from exc


def append_csv_row(row: CsvRow, path: str) -> None:
    try:
        with open(path, "a", newline="", encoding="utf-8") as handle:
            csv.writer(handle, lineterminator="\n").writerow(row.fields())
    except OSError as exc:
        raise PPDEError(ERR_IO, f"cannot append to {path}: {exc}") from exc


def _trace_path(base: Optional[str], dim: int, run: int) -> Optional[str]:
    if base is None:
        return None
    stem, ext = os.path.splitext(base)
    return f"{stem}_d{dim}_run{run}{ext or '.jsonl'}"


def _run_once(config: ExperimentConfig, dim: int, run: int) -> SolverResult:
    scheme = replace(config.scheme, dim=dim, seed=config.scheme.seed + run)
    solver = PPDESolver(scheme)
    solver.set_loss_trace(_trace_path(config.loss_trace, dim, run))
    return solver.solve()


def _run_dimension(config: ExperimentConfig, dim: int, grid: TimeGrid) -> List[SolverResult]:
    """All seeded runs of one dimension; CSV rows are appended in run order."""
    if not config.parallel_runs:
        results = []
        for run in range(config.runs):
            results.append(_run_once(config, dim, run))
            append_csv_row(_csv_row(dim, grid, run, results[-1]), config.out_csv)
        return results

    workers = min(max_workers(), config.runs)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(executor.map(lambda run: _run_once(config, dim, run), range(config.runs)))
    for run, result in enumerate(results):
        append_csv_row(_csv_row(dim, grid, run, result), config.out_csv)
    return results


def run_experiment(config: ExperimentConfig) -> int:
    """Run every (dimension, seed) cell; returns the process exit code.

    The CSV is written row by row, so a solver abort leaves the finished
    runs on disk.
    """
    try:
        config.validate()
        write_csv([], config.out_csv)
        cache = OracleCache(config.oracle_cache) if config.oracle_cache else None
        grid = config.scheme.grid
        table: List[TableRow] = []

        for dim in config.dims:
            logger.info("%s d=%d: %d runs", config.problem, dim, config.runs)
            results = _run_dimension(config, dim, grid)
            problem = make_problem(config.problem, dim, grid, config.scheme.problem_params)
            reference = reference_value(problem, config.oracle, cache)
            table.append(
                summarize_runs(
                    dim,
                    [r.v0 for r in results],
                    [r.runtime for r in results],
                    reference.price,
                )
            )

        print(format_table(table, title=f"{config.problem} (N={grid.steps}, T={grid.horizon})"))
        if config.out_json:
            _write_summary(config, table)
    except PPDEError as exc:
        logger.error("%s", exc)
        if exc.code == ERR_USAGE:
            return EXIT_USAGE
        if exc.code == ERR_SOLVER_ABORT:
            logger.error("finished runs are kept in %s", config.out_csv)
        return EXIT_SOLVER_ABORT
    return EXIT_OK


def _csv_row(dim: int, grid: TimeGrid, run: int, result: SolverResult) -> CsvRow:
    return CsvRow(d=dim, T=grid.horizon, N=grid.steps, run=run, y0=result.v0, runtime=result.runtime)


def _write_summary(config: ExperimentConfig, table: Sequence[TableRow]) -> None:
    summary = {
        "problem": config.problem,
        "rows": [row.to_dict() for row in table],
        "config": config.to_dict(),
    }
    try:
        with open(config.out_json, "w", encoding="utf-8") as handle:
            json.dump(summary, handle, indent=2)
    except OSError as exc:
        raise PPDEError(ERR_IO, f"cannot write {config.out_json}: {exc}") from exc


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_arg_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = config_from_args(args)
    except PPDEError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    return run_experiment(config)


if __name__ == "__main__":
    raise SystemExit(main())
