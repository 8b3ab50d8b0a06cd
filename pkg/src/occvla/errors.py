"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DTypeError(TypeError):
    """Operands carry different dtypes where they must agree."""


class NumericDomainError(ArithmeticError):
    """Non-finite input reached an operation that requires finite values."""


class ContractError(RuntimeError):
    """A documented pre-condition was violated by the caller."""


class CapacityError(ValueError):
    """Input exceeds a fixed model capacity (e.g. maximum text length)."""


class GenerationError(RuntimeError):
    """Scene generation could not satisfy its placement constraints."""


class ParseError(ValueError):
    """Text could not be parsed into a structured value."""


class FormatError(ValueError):
    """A serialized artifact is malformed."""


class ChecksumError(FormatError):
    """A serialized artifact's checksum does not match its payload."""


class VersionError(FormatError):
    """A serialized artifact has an unsupported format version."""


class TrainingError(RuntimeError):
    """Training aborted (missing prerequisite, non-finite loss, ...)."""
