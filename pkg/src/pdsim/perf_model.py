"""Power-cap to latency surrogate model and its calibration file format.

Each phase (prefill, decode) has a piecewise-linear speedup curve over the
GPU power cap, normalized to 1.0 at the lowest anchor. Latencies are simple
closed forms divided by that speedup:

    prefill:  sum(tokens) / (base_rate * batch_eff(b)) / speedup
    decode:   (step_fixed + step_per_seq * n) / speedup
    transfer: fixed_overhead + tokens * kv_bytes_per_token / bandwidth

The constants are surrogates, not measurements; override them with a JSON
calibration file (see :func:`load_calibration`).
"""

from __future__ import annotations

import bisect
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from pdsim.errors import CalibrationError, DomainError, RangeError

PHASES = ("prefill", "decode")

DEFAULT_MIN_POWER = 400
DEFAULT_MAX_POWER = 750

# Prefill flattens after ~700 W and reaches 1.8x at 750 W; decode plateaus
# around 1.3-1.5x with the 1.4 midpoint at 600 W.
DEFAULT_PREFILL_ANCHORS = ((400, 1.0), (700, 1.72), (750, 1.8))
DEFAULT_DECODE_ANCHORS = ((400, 1.0), (600, 1.4), (750, 1.45))


@dataclass(frozen=True)
class PowerCurve:
    """Ordered ``(power_w, speedup)`` anchors for one phase."""

    anchors: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        anchors = tuple((int(p), float(s)) for p, s in self.anchors)
        object.__setattr__(self, "anchors", anchors)

    @property
    def powers(self) -> list[int]:
        return [p for p, _ in self.anchors]

    @property
    def speedups(self) -> list[float]:
        return [s for _, s in self.anchors]

    def validate(self, name: str, min_power: int, max_power: int) -> None:
        if len(self.anchors) < 1:
            raise CalibrationError(f"{name}: at least one anchor is required")
        powers, speedups = self.powers, self.speedups
        for a, b in zip(powers, powers[1:]):
            if b <= a:
                raise CalibrationError(f"{name}: anchor powers must be strictly increasing ({a} then {b})")
        for p in powers:
            if not min_power <= p <= max_power:
                raise CalibrationError(f"{name}: anchor power {p} W outside [{min_power}, {max_power}]")
        for a, b in zip(speedups, speedups[1:]):
            if b < a:
                raise CalibrationError(f"{name}: speedups must be non-decreasing in power ({a} then {b})")
        if speedups[0] != 1.0:
            raise CalibrationError(f"{name}: speedup at the lowest anchor must be 1.0, got {speedups[0]}")

    def interpolate(self, power: float) -> float:
        """Piecewise-linear speedup; constant beyond the outermost anchors."""
        powers = self.powers
        speedups = self.speedups
        if power <= powers[0]:
            return speedups[0]
        if power >= powers[-1]:
            return speedups[-1]
        i = bisect.bisect_right(powers, power)
        p0, p1 = powers[i - 1], powers[i]
        s0, s1 = speedups[i - 1], speedups[i]
        if power == p0:
            return s0
        return s0 + (s1 - s0) * (power - p0) / (p1 - p0)


@dataclass(frozen=True)
class LatencyModelParams:
    prefill_base_rate: float = 13000.0  # tokens/s at the lowest anchor, batch 1
    prefill_batch_efficiency: float = 0.15
    decode_step_fixed: float = 0.008  # s
    decode_step_per_seq: float = 0.00025  # s per active sequence
    kv_bytes_per_token: float = 131072.0  # 32 layers * 8 kv heads * 128 dim * 2 tensors * 2 bytes
    fabric_bandwidth: float = 48e9  # bytes/s
    transfer_fixed_overhead: float = 0.0005  # s

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
                raise CalibrationError(f"latency_params.{name} must be strictly positive, got {value!r}")


@dataclass(frozen=True)
class Calibration:
    prefill: PowerCurve = field(default_factory=lambda: PowerCurve(DEFAULT_PREFILL_ANCHORS))
    decode: PowerCurve = field(default_factory=lambda: PowerCurve(DEFAULT_DECODE_ANCHORS))
    params: LatencyModelParams = field(default_factory=LatencyModelParams)
    min_power: int = DEFAULT_MIN_POWER
    max_power: int = DEFAULT_MAX_POWER

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.min_power < self.max_power:
            raise CalibrationError(
                f"min_power ({self.min_power}) must be below max_power ({self.max_power})"
            )
        self.prefill.validate("prefill_anchors", self.min_power, self.max_power)
        self.decode.validate("decode_anchors", self.min_power, self.max_power)
        self.params.validate()

    def curve(self, phase: str) -> PowerCurve:
        if phase == "prefill":
            return self.prefill
        if phase == "decode":
            return self.decode
        raise DomainError(f"unknown phase {phase!r}; expected one of {PHASES}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "min_power": self.min_power,
            "max_power": self.max_power,
            "prefill_anchors": [list(a) for a in self.prefill.anchors],
            "decode_anchors": [list(a) for a in self.decode.anchors],
            "latency_params": asdict(self.params),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Calibration":
        if not isinstance(data, dict):
            raise CalibrationError("calibration must be a JSON object")
        known = {"min_power", "max_power", "prefill_anchors", "decode_anchors", "latency_params"}
        unknown = set(data) - known
        if unknown:
            raise CalibrationError(f"unknown calibration keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for key in ("min_power", "max_power"):
            if key in data:
                kwargs[key] = _as_int(data[key], key)
        for key, attr in (("prefill_anchors", "prefill"), ("decode_anchors", "decode")):
            if key in data:
                kwargs[attr] = PowerCurve(_parse_anchors(data[key], key))
        if "latency_params" in data:
            raw = data["latency_params"]
            if not isinstance(raw, dict):
                raise CalibrationError("latency_params must be an object")
            allowed = set(LatencyModelParams.__dataclass_fields__)
            bad = set(raw) - allowed
            if bad:
                raise CalibrationError(f"unknown latency_params keys: {sorted(bad)}")
            kwargs["params"] = LatencyModelParams(**raw)
        return cls(**kwargs)


def _as_int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise CalibrationError(f"{name} must be an integer number of watts, got {value!r}")
    return int(value)


def _parse_anchors(raw: Any, name: str) -> tuple[tuple[int, float], ...]:
    if not isinstance(raw, (list, tuple)):
        raise CalibrationError(f"{name} must be a list of [watts, speedup] pairs")
    out = []
    for i, pair in enumerate(raw):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise CalibrationError(f"{name}[{i}] must be a [watts, speedup] pair")
        out.append((_as_int(pair[0], f"{name}[{i}] power"), float(pair[1])))
    return tuple(out)


def load_calibration(path: str | Path | None = None) -> Calibration:
    """Load and validate a JSON calibration file.

    Every key is optional; absent keys take the built-in defaults. An empty
    file (or ``path=None``) yields the default calibration.
    """
    if path is None:
        return Calibration()
    text = Path(path).read_text()
    if not text.strip():
        return Calibration()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CalibrationError(f"{path}: invalid JSON: {exc}") from exc
    return Calibration.from_dict(data)


class PerfModel:
    """Latency functions evaluated against an immutable calibration."""

    def __init__(self, calibration: Calibration | None = None):
        self.calibration = calibration or Calibration()

    @property
    def min_power(self) -> int:
        return self.calibration.min_power

    @property
    def max_power(self) -> int:
        return self.calibration.max_power

    def check_power(self, power: float) -> None:
        if not self.min_power <= power <= self.max_power:
            raise RangeError(
                f"power cap {power} W outside supported range [{self.min_power}, {self.max_power}]"
            )

    def speedup(self, phase: str, power: float) -> float:
        curve = self.calibration.curve(phase)
        self.check_power(power)
        return curve.interpolate(power)

    def prefill_latency(self, input_tokens: int, batch_size: int, power: float) -> float:
        """Seconds to prefill a batch holding ``input_tokens`` tokens in total."""
        if input_tokens < 1:
            raise DomainError(f"input_tokens must be >= 1, got {input_tokens}")
        if batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {batch_size}")
        p = self.calibration.params
        eff = 1.0 + p.prefill_batch_efficiency * (batch_size - 1)
        return input_tokens / (p.prefill_base_rate * eff) / self.speedup("prefill", power)

    def decode_step_latency(self, active_sequences: int, power: float) -> float:
        if active_sequences < 1:
            raise DomainError("decode step requires at least one active sequence")
        p = self.calibration.params
        return (p.decode_step_fixed + p.decode_step_per_seq * active_sequences) / self.speedup("decode", power)

    def kv_transfer_latency(self, input_tokens: int) -> float:
        if input_tokens < 1:
            raise DomainError(f"input_tokens must be >= 1, got {input_tokens}")
        p = self.calibration.params
        return p.transfer_fixed_overhead + input_tokens * p.kv_bytes_per_token / p.fabric_bandwidth

