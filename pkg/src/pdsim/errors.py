"""Exception types raised across the simulator."""


class PdsimError(Exception):
    """Base class for all simulator errors."""


class RangeError(PdsimError, ValueError):
    """A power value fell outside the supported cap range."""


class DomainError(PdsimError, ValueError):
    """An argument is outside the domain of a latency or workload function."""


class CalibrationError(PdsimError, ValueError):
    """A calibration file failed validation."""


class TraceFormatError(PdsimError, ValueError):
    """A trace file row could not be parsed."""


class ConfigError(PdsimError, ValueError):
    """A simulation or experiment configuration is invalid."""
