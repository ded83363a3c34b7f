"""Exception hierarchy shared across the package."""


class AeroJEPAError(Exception):
    """Base class for all package errors."""


class DimensionError(AeroJEPAError, ValueError):
    """Array shapes are incompatible for the requested operation."""


class NumericError(AeroJEPAError, FloatingPointError):
    """A computation produced a non-finite value or a singular system."""


class UsageError(AeroJEPAError, RuntimeError):
    """An API was called in a state or with arguments it does not support."""


class GeometryError(AeroJEPAError, ValueError):
    """A contour or point cloud is degenerate, open, or unordered."""


class GenerationError(AeroJEPAError, ValueError):
    """Synthetic-case parameters fall outside the valid map range."""


class ContractError(AeroJEPAError, ValueError):
    """An input violates a model data contract (e.g. field channels fed to the context encoder)."""


class FormatError(AeroJEPAError, ValueError):
    """A binary artifact is truncated, has the wrong magic/version, or mismatches its config."""


class InfeasibleError(AeroJEPAError, RuntimeError):
    """No restart of a constrained solve reached a feasible point."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or {}


class DivergenceError(NumericError):
    """Training produced a non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
