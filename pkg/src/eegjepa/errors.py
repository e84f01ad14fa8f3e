"""Exception hierarchy for the toolkit.

Every error raised deliberately by this package derives from ToolkitError so
callers (and the CLI) can distinguish our diagnostics from genuine bugs.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ToolkitError):
    """Invalid configuration value, file, or combination of options."""


class GeometryError(ToolkitError):
    """Montage geometry is unusable (too few electrodes, coincident sites, ...)."""


class MaskingError(ToolkitError):
    """No valid spatial mask exists for the requested parameters."""


class ShapeError(ToolkitError):
    """An array or tensor has an incompatible shape."""


class DataError(ToolkitError):
    """Malformed recordings, containers, or label sets."""


class ResamplingError(ToolkitError):
    """Requested resampling is impossible (e.g. upsampling past the raw rate)."""


class SplitError(ToolkitError):
    """A requested data split cannot be honoured (class too small, overlap, ...)."""


class ScoringError(ToolkitError):
    """Metric cannot be computed (length mismatch, single-class labels, ...)."""


class StateError(ToolkitError):
    """Training state is inconsistent (mismatched parameter sets, bad resume)."""


class CompatibilityError(ToolkitError):
    """A checkpoint does not match the requested model or montage."""


class AggregationError(ToolkitError):
    """Result aggregation found missing or inconsistent entries."""


class NonFiniteLossError(ToolkitError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at optimisation step {step}")
