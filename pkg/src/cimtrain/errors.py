"""Exception types raised across the package."""


class CimError(Exception):
    """Base class for all package errors."""


class DimensionError(CimError, ValueError):
    """Operand shapes are incompatible."""


class RangeError(CimError, ValueError):
    """A quantization range is degenerate or otherwise invalid."""


class MappingError(CimError, ValueError):
    """A weight cannot be mapped onto the device conductance range."""


class DeploymentError(CimError, ValueError):
    """A crossbar deployment does not match the network it is applied to."""


class FormatError(CimError, ValueError):
    """A data or description file is malformed."""


class CatalogError(CimError, KeyError):
    """The periphery catalog has no entry for the requested device."""


class ConfigError(CimError, ValueError):
    """An experiment configuration is invalid."""


class TrainingError(CimError, RuntimeError):
    """Training diverged (non-finite loss or parameters)."""
