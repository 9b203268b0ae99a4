"""Exception types shared across the simulator."""


class SimulationError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SimulationError):
    """Vector operands have incompatible dimensions."""


class NumericError(SimulationError):
    """A value that must be finite (or positive) is not."""


class PolicyError(SimulationError):
    """A quantization-level or skip-policy parameter is out of range."""


class DegenerateInput(SimulationError):
    """An operation was asked for on an input where it is undefined."""


class ConfigError(SimulationError):
    """A run configuration is missing, malformed, or infeasible."""
