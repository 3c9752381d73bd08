"""Error codes and error types for the deep-ppde solver."""

# Error codes
ERR_INVALID_PARAM = 1001
ERR_NUMERIC = 1002
ERR_SHAPE_MISMATCH = 1003
ERR_USAGE = 1004
ERR_IO = 1005
ERR_CHECKPOINT = 1006
ERR_SOLVER_ABORT = 1007


class PPDEError(Exception):
    """Error raised by the solver, its oracles or the command line."""

    def __init__(self, code: int, message: str) -> None:
        self.code = code
        self.message = message
        super().__init__(f"deep-ppde error [{code}]: {message}")
