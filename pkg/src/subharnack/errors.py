"""Exception hierarchy shared by all modules."""


class SubHarnackError(Exception):
    """Base class for library errors."""


class ConfigurationError(SubHarnackError, ValueError):
    """Invalid grid, frame, rectangle or parameter combination."""


class DomainError(SubHarnackError, ValueError):
    """A value lies outside the domain where an operation is defined."""


class GeometryError(SubHarnackError, ValueError):
    """A ball or rectangle does not fit inside the grid or horizon."""


class CFLViolation(SubHarnackError, ValueError):
    """Time step exceeds the admissible explicit step.

    The admissible value is stored on ``admissible_dt``.
    """

    def __init__(self, message, admissible_dt):
        super().__init__(message)
        self.admissible_dt = admissible_dt


class StructuralViolation(SubHarnackError, ValueError):
    """A nonlinear flux violates its declared structural constants.

    ``witness`` holds the offending sample as a dict.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness or {}


class SolverBlowUp(SubHarnackError, FloatingPointError):
    """Non-finite values appeared during time marching."""
