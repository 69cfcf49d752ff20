"""Exception hierarchy shared by every splatcam app.

The CLI maps these to exit codes (see ``main/urls.py``):
usage / contract problems -> 1, data problems -> 2, numerical faults -> 3.
"""


class SplatcamError(Exception):
    """Base class for all errors raised on purpose by splatcam."""


# ==========================================
# 1. Contract / usage errors
# ==========================================

class ContractViolation(SplatcamError, ValueError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(ContractViolation):
    """Invalid configuration file, flag or ablation name."""


class ScheduleError(ContractViolation):
    """A training schedule breaks the view-count or encapsulation rules."""


# ==========================================
# 2. Data errors
# ==========================================

class DataError(SplatcamError):
    """Unreadable or inconsistent input data."""


class PlyFormatError(DataError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class SceneGenerationError(DataError):
    """The generator could not produce a scene with usable frustum coverage."""


# ==========================================
# 3. Numerical faults
# ==========================================

class NumericalFault(SplatcamError, ArithmeticError):
    """NaN or Inf reached a value that must stay finite.

    ``op_name`` names the primitive (or loss component) where the fault was seen and
    ``diagnostics`` carries whatever context the raiser could collect (step, norms, ...).
    """

    def __init__(self, op_name, message="non-finite value", diagnostics=None):
        self.op_name = op_name
        self.diagnostics = dict(diagnostics or {})
        super().__init__(f"{message} in '{op_name}'")


class HarnessError(SplatcamError):
    """The gradient-check harness was used on something it cannot check."""
