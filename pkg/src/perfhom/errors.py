"""Exception hierarchy shared by all modules."""


class PerfhomError(Exception):
    """Base class."""


class InvalidInputError(PerfhomError, ValueError):
    pass


class UnsupportedKindError(PerfhomError, ValueError):
    pass


class NotApplicableError(PerfhomError, ValueError):
    pass


class ResolutionError(PerfhomError, ValueError):
    """Geometry not resolved by the grid; ``required_h`` names the fix."""

    def __init__(self, msg, required_h=None):
        super().__init__(msg)
        self.required_h = required_h


class EmptyCellError(PerfhomError, ValueError):
    pass


class InvalidDensityError(PerfhomError, ValueError):
    pass


class InvalidScheduleError(PerfhomError, ValueError):
    pass


class DegenerateSubdivisionError(PerfhomError, ValueError):
    pass


class InvalidTestFunctionError(PerfhomError, ValueError):
    pass


class PremiseError(PerfhomError, ValueError):
    pass


class ConfigError(PerfhomError, ValueError):
    """Invalid or missing configuration; ``line`` anchors JSON problems."""

    def __init__(self, msg, line=None):
        super().__init__(msg)
        self.line = line


class SolverError(PerfhomError, RuntimeError):
    """Nonlinear solve failed; carries the residual history."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])
