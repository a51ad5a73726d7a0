"""Exception and warning types raised across the package."""


class CateFusionError(Exception):
    """Base class for package errors."""


class DimensionMismatch(CateFusionError, ValueError):
    pass


class EmptyFold(CateFusionError, ValueError):
    pass


class RankDeficient(CateFusionError, ValueError):
    pass


class SingularCovariance(CateFusionError, ValueError):
    pass


class BlockUnavailable(CateFusionError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the plain message instead.
        return str(self.args[0]) if self.args else ""


class ArmTooSmall(CateFusionError, ValueError):
    pass


class OsArmMissing(CateFusionError, ValueError):
    pass


class ImputationUnavailable(CateFusionError, ValueError):
    pass


class OverlapViolation(CateFusionError, ValueError):
    pass


class InfeasiblePartition(CateFusionError, ValueError):
    pass


class CalibrationFailure(CateFusionError, RuntimeError):
    pass


class ZeroSignalRow(CateFusionError, ValueError):
    pass


class ConfigParse(CateFusionError, ValueError):
    """Config file problem; ``field`` and ``line`` locate it when known."""

    def __init__(self, message, field=None, line=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        prefix = f"[{', '.join(loc)}] " if loc else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line


class WorkerPanic(CateFusionError, RuntimeError):
    """A worker process died; ``task`` names the (grid point, replicate) it held."""

    def __init__(self, message, task=None):
        super().__init__(message if task is None else f"{message} (task {task})")
        self.task = task


class ConvergenceWarning(UserWarning):
    """Coordinate descent hit ``max_iter`` before meeting ``tol``."""


class SeparationWarning(UserWarning):
    """A fitted logistic probability is numerically 0 or 1."""
