"""Exception types shared across the pipeline."""


class LPLDError(Exception):
    """Base class for all library errors."""


class ShapeError(LPLDError):
    """Tensor or layer dimensions do not line up."""


class GraphError(LPLDError):
    """Backward called without a recorded computation graph."""


class NonFiniteError(LPLDError):
    """A NaN or Inf appeared where finite values are required."""


class LabelStoreError(LPLDError):
    """Label store or pool file is malformed, truncated, or inconsistent."""


class ChecksumError(LPLDError):
    """Artifacts from different phases do not belong together."""


class ConfigError(LPLDError):
    """Invalid configuration value or missing input artifact."""
