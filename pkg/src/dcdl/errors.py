"""Shared exception types."""


class ContractError(ValueError):
    """A caller violated an operation precondition (dimension mismatch, bad geometry, ...)."""


class DataFormatError(ValueError):
    """A data file could not be parsed."""


class IdxFormatError(DataFormatError):
    """Malformed IDX image/label file."""


class Cifar10FormatError(DataFormatError):
    """Malformed CIFAR-10 binary batch file."""


class RuleParseError(DataFormatError):
    """Malformed formula / rule / model text."""


class ModelFormatError(DataFormatError):
    """Malformed serialized network model."""


class TrainingFailure(RuntimeError):
    """Network training diverged (non-finite loss)."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""
