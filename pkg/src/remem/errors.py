"""Exception hierarchy.

Each error carries a category that maps onto a CLI exit code.
"""


class RememError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(RememError, ValueError):
    category = "config"
    exit_code = 2


class ParameterError(ConfigError):
    """Invalid argument value (temperature <= 0, k out of range, ...)."""


class ShapeError(RememError, ValueError):
    category = "dimension"
    exit_code = 3


class DomainError(RememError, ValueError):
    category = "domain"
    exit_code = 3


class NumericError(RememError, ArithmeticError):
    category = "numeric"
    exit_code = 3


class UsageError(RememError, RuntimeError):
    category = "usage"
    exit_code = 1


class StructuralError(RememError, ValueError):
    """Operation requested on a block that has been pruned away."""

    category = "structural"
    exit_code = 3


class SizeError(RememError, ValueError):
    """Enumeration would exceed its guard."""

    category = "size"
    exit_code = 3


class FormatError(RememError, OSError):
    category = "io"
    exit_code = 4


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TensorMismatchError(FormatError):
    """Checkpoint tensors disagree with the model config (shape, missing or unknown names)."""


class ValidationError(FormatError):
    """File parsed but its content violates an invariant."""
