"""
Exception hierarchy for homflow.

Every concrete error also derives from the builtin it refines, so callers
that catch ``ValueError`` or ``RuntimeError`` keep working.
"""

from typing import Any, List, Optional


class HomflowError(Exception):
    """Root of all homflow errors."""


class ConfigError(HomflowError, ValueError):
    """
    Scenario configuration could not be parsed or validated.

    Attributes:
        errors (List[str]): every violation found, not just the first
    """

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class GeometryError(HomflowError, ValueError):
    """Invalid microstructure or depth specification."""


class UnsupportedShapeError(GeometryError):
    """Requested closed form is only known for disks."""


class SolverConvergenceError(HomflowError, RuntimeError):
    """
    Conjugate-gradient iteration did not reach the requested tolerance.

    Attributes:
        residual_history (List[float]): residual norm per iteration
    """

    def __init__(self, message: str, residual_history: Optional[List[float]] = None):
        self.residual_history = list(residual_history or [])
        super().__init__(message)


class PenalizationError(HomflowError, RuntimeError):
    """Minimal energies along the penalty ladder are not nondecreasing."""


class TensorAssemblyError(HomflowError, RuntimeError):
    """
    Assembled tensor is asymmetric or indefinite beyond tolerance.

    Attributes:
        report (dict): residuals that triggered the failure
    """

    def __init__(self, message: str, report: Optional[dict] = None):
        self.report = dict(report or {})
        super().__init__(message)


class CFLViolationError(HomflowError, ValueError):
    """Time step too large for the transport field."""


class NonZeroMeanError(HomflowError, ValueError):
    """Vorticity or forcing has a nonzero mean on the torus."""


class SimulationBlowupError(HomflowError, RuntimeError):
    """
    Non-finite values appeared during time stepping.

    Attributes:
        last_good_state: the last state with finite values
    """

    def __init__(self, message: str, last_good_state: Any = None):
        self.last_good_state = last_good_state
        super().__init__(message)


class FieldFormatError(HomflowError, ValueError):
    """Binary field file is malformed."""


class ConvergenceStudyError(HomflowError, RuntimeError):
    """
    Error sequence of an epsilon study is not monotone.

    Attributes:
        table: the full error table
    """

    def __init__(self, message: str, table: Any = None):
        self.table = table
        super().__init__(message)
