"""Exception types shared across the package."""


class SdmDsgdError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SdmDsgdError, ValueError):
    """An argument lies outside its mathematical domain."""


class ConnectivityFailure(SdmDsgdError):
    """Random graph sampling kept producing disconnected topologies."""


class SigmaFloorViolation(DomainError):
    """Gaussian variance is below the floor required for subsampling amplification."""


class EmptyPartition(SdmDsgdError):
    """A node was asked for a stochastic gradient but holds no samples."""


class ParseError(SdmDsgdError):
    """A data or graph file could not be parsed; message names the offending row."""


class DimensionMismatch(SdmDsgdError):
    """Rows or vectors with inconsistent dimensions."""


class ConfigError(SdmDsgdError):
    """Invalid algorithm or run configuration."""


class ConfigParseError(ConfigError):
    """A config file failed to parse or is missing required fields."""


class ScheduleViolation(DomainError):
    """The step-mixing parameter violates the convergence precondition."""
