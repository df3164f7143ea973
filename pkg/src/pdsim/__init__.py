"""Discrete-event simulator for power-capped, disaggregated LLM inference nodes."""

from pdsim.errors import (
    CalibrationError,
    ConfigError,
    DomainError,
    PdsimError,
    RangeError,
    TraceFormatError,
)
from pdsim.perf_model import Calibration, LatencyModelParams, PerfModel, PowerCurve, load_calibration

__version__ = "0.1.0"

__all__ = [
    "Calibration",
    "CalibrationError",
    "ConfigError",
    "DomainError",
    "LatencyModelParams",
    "PdsimError",
    "PerfModel",
    "PowerCurve",
    "RangeError",
    "TraceFormatError",
    "load_calibration",
]
