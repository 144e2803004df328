"""Shared exception types."""


class InputError(ValueError):
    """An argument violated an operation's precondition."""


class ContractViolation(ValueError):
    """An internal contract was broken (e.g. non-scalar loss node)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite value.

    Carries the stage and iteration where divergence was detected so the
    failure can be reported instead of silently propagating NaNs.
    """

    def __init__(self, message: str, stage: str | None = None,
                 iteration: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.iteration = iteration
