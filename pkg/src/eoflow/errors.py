"""Exception types shared across the package."""


class EOFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(EOFlowError, ValueError):
    """Operand shapes do not fit a primitive."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericalError(EOFlowError, ArithmeticError):
    """A non-finite value was produced or supplied."""


class DegenerateGeometryError(NumericalError):
    """A Jacobian sub-block has (numerically) zero volume."""


class CheckpointError(EOFlowError, ValueError):
    """A checkpoint file is malformed, truncated or of an unsupported version."""


class DataFormatError(EOFlowError, ValueError):
    """A data file could not be parsed."""


class ConfigError(EOFlowError, ValueError):
    """Invalid configuration key or value."""
