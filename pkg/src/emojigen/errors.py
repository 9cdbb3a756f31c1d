"""Exception types shared across the package."""


class EmojigenError(Exception):
    """Base class for all package errors."""


class InvalidFormatError(EmojigenError, ValueError):
    """Pixel data does not have the expected channel layout or dtype."""


class InvalidArgumentError(EmojigenError, ValueError):
    """Argument outside the documented domain."""


class ShapeError(EmojigenError, ValueError):
    """Tensor or image has an unexpected shape."""


class InvalidTokenError(EmojigenError, ValueError):
    """Token id outside the combined vocabulary."""


class ParseError(EmojigenError, ValueError):
    """Malformed manifest or journal line; message carries the line number."""


class DecodeError(EmojigenError):
    """Image file could not be decoded."""


class UnsupportedFormatError(EmojigenError):
    """Image file decodes but is not 8-bit RGB/RGBA (or L for masks)."""


class ContractViolationError(EmojigenError):
    """Caller violated a numeric precondition (e.g. unnormalized probabilities)."""


class ConfigurationError(EmojigenError):
    """Missing or inconsistent checkpoints / masks / run configuration."""


class UndefinedLossError(EmojigenError):
    """Loss requested over an empty (all-PAD) target set."""


class TrainingDivergedError(EmojigenError):
    """Non-finite loss or gradient; message identifies where."""


class InsufficientSampleError(EmojigenError, ValueError):
    """Too few samples for the requested statistic."""
