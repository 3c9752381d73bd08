"""Deep backward scheme for path-dependent PDEs."""

from deep_ppde.problems import (
    AsianOption,
    BarrierOption,
    ControlProblem,
    GameParams,
    OptionParams,
    ProblemSpec,
    make_problem,
    register_problem,
)
from deep_ppde.scheme import (
    PPDESolver,
    SchemeConfig,
    SolverResult,
    apply_scheme_operator,
    solve,
    sym,
)
from deep_ppde.reference import (
    McConfig,
    McResult,
    control_reference,
    mc_price_asian,
    mc_price_barrier,
)
from deep_ppde.paths import TimeGrid
from deep_ppde.errors import PPDEError

__all__ = [
    "AsianOption",
    "BarrierOption",
    "ControlProblem",
    "GameParams",
    "OptionParams",
    "ProblemSpec",
    "make_problem",
    "register_problem",
    "PPDESolver",
    "SchemeConfig",
    "SolverResult",
    "apply_scheme_operator",
    "solve",
    "sym",
    "McConfig",
    "McResult",
    "control_reference",
    "mc_price_asian",
    "mc_price_barrier",
    "TimeGrid",
    "PPDEError",
]

__version__ = "0.1.0"
