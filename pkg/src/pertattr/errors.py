"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what the operation requires."""


class ParameterError(ValueError):
    """A hyperparameter or argument is outside its valid range."""


class CapabilityError(RuntimeError):
    """The model does not support the requested operation (e.g. gradients)."""


class FormatError(ValueError):
    """A file does not conform to its declared binary/text format."""


class ExternalToolError(RuntimeError):
    """An external helper process failed or produced unusable output."""


class MethodError(RuntimeError):
    """An attribution method failed mid-run; the message names the step."""
