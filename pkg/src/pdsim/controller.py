"""Reactive power and GPU reallocation controller.

Every tick the controller looks at recent TTFT/TPOT statistics and the prefill
queue, and either shifts power between the prefill and decode pools, moves a
GPU between roles, or does nothing. Two guards drive it:

* TTFT over target, prefill queue over threshold, TPOT under target:
  help prefill (decode -> prefill).
* TPOT over target, TTFT under target: help decode (prefill -> decode).

A power move is tried first; when the power limits for that direction are
reached the controller escalates to a GPU move followed by a uniform power
redistribution. Successive actions are separated by a cooldown.

Policies mask the escalation paths: ``static`` never acts, ``dyn-power`` only
moves power, ``dyn-gpu`` only moves GPUs, ``dyn-both`` does both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from pdsim.errors import ConfigError
from pdsim.metrics import percentile

POLICIES = ("static", "dyn-power", "dyn-gpu", "dyn-both")
STATISTICS = ("p90", "mean")

DECODE_TO_PREFILL = "decode->prefill"
PREFILL_TO_DECODE = "prefill->decode"
DIRECTIONS = (DECODE_TO_PREFILL, PREFILL_TO_DECODE)


@dataclass(frozen=True)
class ControllerConfig:
    policy: str = "static"
    ttft_slo: float = 1.0
    tpot_slo: float = 0.040
    queue_threshold: int = 8
    cooldown: float = 4.0
    tick_period: float = 0.25
    power_step: int = 50
    min_p: int = 400
    max_p: int = 750
    decode_dynamic_ceiling: int = 600
    metric_window: float = 5.0
    metric_statistic: str = "p90"

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown controller policy {self.policy!r}; expected one of {POLICIES}")
        if self.metric_statistic not in STATISTICS:
            raise ConfigError(f"metric_statistic must be one of {STATISTICS}")
        if not self.min_p <= self.decode_dynamic_ceiling <= self.max_p:
            raise ConfigError("controller requires min_p <= decode_dynamic_ceiling <= max_p")
        if not self.tick_period > 0:
            raise ConfigError("tick_period must be > 0")
        if not self.cooldown > self.tick_period:
            raise ConfigError("cooldown must exceed tick_period")
        if not self.power_step > 0:
            raise ConfigError("power_step must be > 0")
        if not self.metric_window > 0:
            raise ConfigError("metric_window must be > 0")


@dataclass(frozen=True)
class WorkerView:
    """What the controller may see about one GPU."""

    id: int
    role: str
    cap: int
    draining: bool = False
    queued_requests: int = 0
    queued_tokens: int = 0
    active_sequences: int = 0


@dataclass(frozen=True)
class Snapshot:
    workers: tuple[WorkerView, ...]
    budget: int
    settles_pending: bool = False
    role_change_pending: bool = False
    # Recorded for analysis; the guards do not use them.
    rate_prefill: float = 0.0
    rate_decode: float = 0.0

    def pool(self, role: str) -> list[WorkerView]:
        return [w for w in self.workers if w.role == role and not w.draining]

    @property
    def prefill_queue(self) -> int:
        return sum(w.queued_requests for w in self.workers if w.role == "prefill")


@dataclass(frozen=True)
class Action:
    kind: str = "none"  # none | move-power | move-gpu
    direction: str | None = None
    # Commanded caps to apply, keyed by worker id. For move-gpu this is the
    # uniform redistribution over all GPUs.
    cap_targets: dict[int, int] = field(default_factory=dict)
    freed_watts: int = 0
    worker: int | None = None
    new_role: str | None = None
    limits_reached: bool = False
    saturated: bool = False  # set on a none action that should be logged


NONE = Action()


def _roles(direction: str) -> tuple[str, str]:
    """(donor role, recipient role) for a direction."""
    if direction == DECODE_TO_PREFILL:
        return "decode", "prefill"
    if direction == PREFILL_TO_DECODE:
        return "prefill", "decode"
    raise ValueError(f"unknown direction {direction!r}")


def ceiling_for(role: str, cfg: ControllerConfig) -> int:
    return cfg.max_p if role == "prefill" else cfg.decode_dynamic_ceiling


def power_limits_reached(direction: str, prefill_caps: Sequence[int], decode_caps: Sequence[int],
                         cfg: ControllerConfig) -> bool:
    """True iff every recipient sits at its ceiling or every donor at its floor."""
    donor_role, recipient_role = _roles(direction)
    by_role = {"prefill": list(prefill_caps), "decode": list(decode_caps)}
    donors, recipients = by_role[donor_role], by_role[recipient_role]
    ceiling = ceiling_for(recipient_role, cfg)
    recipients_full = all(c >= ceiling for c in recipients)
    donors_empty = all(c <= cfg.min_p for c in donors)
    return recipients_full or donors_empty


@dataclass(frozen=True)
class PowerMove:
    donor_targets: dict[int, int]
    recipient_targets: dict[int, int]
    freed_watts: int

    @property
    def targets(self) -> dict[int, int]:
        return {**self.donor_targets, **self.recipient_targets}


def move_power(direction: str, workers: Iterable[WorkerView], cfg: ControllerConfig) -> PowerMove | None:
    """Plan one power step, or return None when the limits are reached.

    Every donor drops by ``power_step`` (clamped at ``min_p``); the freed watts
    are split evenly over the recipient pool (floor division, clamped at the
    recipient ceiling). Watts that cannot be placed stay unallocated.
    """
    donor_role, recipient_role = _roles(direction)
    pool = [w for w in workers if not w.draining]
    donors = [w for w in pool if w.role == donor_role]
    recipients = [w for w in pool if w.role == recipient_role]
    if not donors or not recipients:
        return None
    if power_limits_reached(
        direction,
        [w.cap for w in pool if w.role == "prefill"],
        [w.cap for w in pool if w.role == "decode"],
        cfg,
    ):
        return None
    donor_targets = {w.id: max(cfg.min_p, w.cap - cfg.power_step) for w in donors}
    freed = sum(w.cap - donor_targets[w.id] for w in donors)
    share = freed // len(recipients)
    ceiling = ceiling_for(recipient_role, cfg)
    recipient_targets = {w.id: min(ceiling, w.cap + share) for w in recipients}
    return PowerMove(donor_targets, recipient_targets, freed)


def uniform_cap(budget: int, gpu_count: int, cfg: ControllerConfig) -> int:
    return max(cfg.min_p, min(cfg.max_p, budget // gpu_count))


def select_gpu_donor(direction: str, workers: Iterable[WorkerView]) -> int | None:
    """Least-loaded non-draining worker of the donor role, or None if moving it
    would leave that role empty."""
    donor_role, _ = _roles(direction)
    donors = [w for w in workers if w.role == donor_role and not w.draining]
    if len(donors) < 2:
        return None
    if donor_role == "decode":
        key = lambda w: (w.active_sequences, w.id)  # noqa: E731
    else:
        key = lambda w: (w.queued_tokens, w.id)  # noqa: E731
    return min(donors, key=key).id


def rolling_stat(samples: Iterable[tuple[float, float]], now: float, window: float, statistic: str = "p90") -> float:
    """Statistic over samples stamped in ``[now - window, now]``; 0 when empty."""
    values = [v for t, v in samples if now - window <= t <= now]
    if not values:
        return 0.0
    if statistic == "mean":
        return math.fsum(values) / len(values)
    return percentile(values, 90)


def rolling_metrics(ttft_samples: Iterable[tuple[float, float]], tpot_samples: Iterable[tuple[float, float]],
                    now: float, window: float, statistic: str = "p90") -> tuple[float, float]:
    return (rolling_stat(ttft_samples, now, window, statistic),
            rolling_stat(tpot_samples, now, window, statistic))


class Controller:
    """Stateful wrapper holding the last-move time and saturation latch."""

    def __init__(self, config: ControllerConfig | None = None):
        self.config = config or ControllerConfig()
        self.last_move_time = 0.0
        self._saturated_direction: str | None = None

    def tick(self, snapshot: Snapshot, ttft: float, tpot: float, now: float,
             slo: tuple[float, float] | None = None) -> Action:
        cfg = self.config
        if cfg.policy == "static":
            return NONE
        ttft_slo, tpot_slo = slo if slo is not None else (cfg.ttft_slo, cfg.tpot_slo)
        cooled = (now - self.last_move_time) > cfg.cooldown
        if not cooled or snapshot.settles_pending or snapshot.role_change_pending:
            return NONE
        if ttft > ttft_slo and snapshot.prefill_queue > cfg.queue_threshold and tpot < tpot_slo:
            direction = DECODE_TO_PREFILL
        elif tpot > tpot_slo and ttft < ttft_slo:
            direction = PREFILL_TO_DECODE
        else:
            return NONE
        action = self._act(direction, snapshot)
        if action.kind != "none":
            self.last_move_time = now
            self._saturated_direction = None
            return action
        if self._saturated_direction == direction:
            return NONE
        self._saturated_direction = direction
        return action

    def _act(self, direction: str, snapshot: Snapshot) -> Action:
        cfg = self.config
        if cfg.policy in ("dyn-power", "dyn-both"):
            plan = move_power(direction, snapshot.workers, cfg)
            if plan is not None:
                return Action("move-power", direction, plan.targets, plan.freed_watts)
            if cfg.policy == "dyn-power":
                return Action(direction=direction, limits_reached=True, saturated=True)
        # dyn-gpu has no power axis, so its power limits count as reached.
        donor = select_gpu_donor(direction, snapshot.workers)
        if donor is None:
            return Action(direction=direction, limits_reached=True, saturated=True)
        cap = uniform_cap(snapshot.budget, len(snapshot.workers), cfg)
        targets = {w.id: cap for w in snapshot.workers}
        _, recipient_role = _roles(direction)
        return Action("move-gpu", direction, targets, worker=donor, new_role=recipient_role, limits_reached=True)
