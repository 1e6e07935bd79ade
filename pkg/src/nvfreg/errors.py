"""Exception types shared across the package.

The CLI maps these onto its exit-code contract:
validation problems -> 1, numerical failures -> 2, file problems -> 3.
"""


class NvfError(Exception):
    """Base class for all package errors."""


class ValidationError(NvfError):
    """Inputs violate a documented precondition (shape, kind, range)."""


class ShapeError(ValidationError):
    """Array dimensions of two operands do not match."""


class DegenerateInputError(ValidationError):
    """Input is structurally valid but degenerate (all-zero image, 1-voxel axis)."""


class ConfigurationError(ValidationError):
    """A configuration key is unknown, mistyped, or out of range."""


class FormatError(NvfError):
    """File does not start with a valid NVF1 header."""


class CorruptFileError(NvfError):
    """File header is valid but the payload is truncated or inconsistent."""


class NumericalError(NvfError):
    """A non-finite value appeared during optimization."""

    def __init__(self, message: str, stage: str | None = None, iteration: int | None = None):
        self.stage = stage
        self.iteration = iteration
        parts = [message]
        if stage is not None:
            parts.append(f"stage={stage}")
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        super().__init__("; ".join(parts))
