"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: configuration problems -> 1, data
problems -> 2, anything else -> 3.
"""


class VlmadError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(VlmadError, ValueError):
    """Invalid configuration: bad window sizes, malformed templates, width mismatches."""


class InputError(VlmadError, ValueError):
    """Invalid runtime input: malformed rasters, shape mismatches, violated preconditions."""


class IngestionError(VlmadError):
    """Dataset on disk does not match the expected layout (e.g. missing mask files)."""


class UndefinedMetricError(VlmadError):
    """A metric has no defined value for the given inputs (e.g. single-class AUROC)."""


class TrainingDivergedError(VlmadError, RuntimeError):
    """Training produced a non-finite loss."""
