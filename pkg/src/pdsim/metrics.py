"""Per-request SLO scoring and run-level summaries (attainment, goodput, QPS/W)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from pdsim.errors import DomainError

US = 1_000_000

# GPUs draw roughly 50-60% of a node's power; the node-level QPS/W divides by
# gpu_power / GPU_SHARE.
GPU_SHARE = 0.6


@dataclass(frozen=True)
class RequestRecord:
    id: int
    arrival: float
    input_tokens: int
    output_tokens: int
    queuing_delay: float
    exec_time: float
    ttft: float
    tpot: float
    completion: float
    met_ttft: bool
    met_tpot: bool
    slo_ttft: float
    slo_tpot: float

    @property
    def met_both(self) -> bool:
        return self.met_ttft and self.met_tpot


def score_request(ttft: float, tpot: float, slo: tuple[float, float]) -> tuple[bool, bool]:
    """Inclusive comparison against ``(ttft_slo, tpot_slo)``."""
    ttft_slo, tpot_slo = slo
    return ttft <= ttft_slo, tpot <= tpot_slo


def make_record(
    rid: int,
    input_tokens: int,
    output_tokens: int,
    arrival_us: int,
    prefill_start_us: int,
    prefill_end_us: int,
    completion_us: int,
    slo: tuple[float, float],
) -> RequestRecord:
    """Build a record from integer-microsecond lifecycle timestamps.

    TTFT is the sum of queuing delay and execution time so the decomposition
    holds exactly in floating point. TPOT spreads everything after the first
    token (including the KV handoff) over the remaining ``output_tokens - 1``.
    """
    queuing = (prefill_start_us - arrival_us) / US
    exec_time = (prefill_end_us - prefill_start_us) / US
    ttft = queuing + exec_time
    tpot = 0.0 if output_tokens == 1 else (completion_us - prefill_end_us) / US / (output_tokens - 1)
    met_ttft, met_tpot = score_request(ttft, tpot, slo)
    return RequestRecord(
        id=rid,
        arrival=arrival_us / US,
        input_tokens=input_tokens,
        output_tokens=output_tokens,
        queuing_delay=queuing,
        exec_time=exec_time,
        ttft=ttft,
        tpot=tpot,
        completion=completion_us / US,
        met_ttft=met_ttft,
        met_tpot=met_tpot,
        slo_ttft=slo[0],
        slo_tpot=slo[1],
    )


def percentile(samples: Iterable[float], p: float) -> float:
    """Nearest-rank percentile: the value at 1-based rank ``ceil(p/100 * n)``."""
    values = sorted(samples)
    n = len(values)
    if n == 0:
        raise DomainError("percentile of an empty sample set is undefined")
    if not 0 <= p <= 100:
        raise DomainError(f"percentile p must lie in [0, 100], got {p}")
    rank = math.ceil(round(p * n / 100, 9))
    return values[max(rank, 1) - 1]


def run_duration(records: Sequence[RequestRecord]) -> float:
    """Last completion minus first arrival."""
    if not records:
        return 0.0
    return max(r.completion for r in records) - min(r.arrival for r in records)


def attainment_and_goodput(records: Sequence[RequestRecord], duration: float | None = None) -> tuple[float, float]:
    if not records:
        return 0.0, 0.0
    if duration is None:
        duration = run_duration(records)
    attained = sum(1 for r in records if r.met_both)
    goodput = attained / duration if duration > 0 else 0.0
    return attained / len(records), goodput


def time_weighted_mean(steps: Sequence[tuple[float, float]], start: float, end: float) -> float:
    """Mean of a right-continuous step function over ``[start, end]``.

    ``steps`` holds ``(time, value)`` change points sorted by time; the value
    before the first change point is taken to be the first value.
    """
    if not steps:
        raise DomainError("empty power time series")
    if end <= start:
        # Degenerate window: report the value in force at ``start``.
        value = steps[0][1]
        for t, v in steps:
            if t <= start:
                value = v
        return float(value)
    total = 0.0
    value = steps[0][1]
    cursor = start
    for t, v in steps:
        if t <= start:
            value = v
            continue
        if t >= end:
            break
        total += value * (t - cursor)
        cursor, value = t, v
    total += value * (end - cursor)
    return total / (end - start)


def qps_per_watt(goodput: float, avg_gpu_power: float, gpu_share: float | None = None) -> float:
    """Goodput per provisioned watt; pass ``gpu_share`` for the node-level variant."""
    if avg_gpu_power <= 0:
        raise DomainError("average provisioned power must be positive")
    denom = avg_gpu_power if gpu_share is None else avg_gpu_power / gpu_share
    return goodput / denom


@dataclass(frozen=True)
class SummaryMetrics:
    num_requests: int
    attained: int
    attainment: float
    goodput: float
    throughput: float
    run_duration: float
    ttft_p50: float
    ttft_p90: float
    ttft_p99: float
    tpot_p50: float
    tpot_p90: float
    tpot_p99: float
    mean_queuing_delay: float
    mean_exec_time: float
    avg_provisioned_gpu_power: float
    qps_per_watt: float
    node_power_estimate: float
    qps_per_node_watt: float

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(
    records: Sequence[RequestRecord],
    power_steps: Sequence[tuple[float, float]],
    gpu_share: float = GPU_SHARE,
) -> SummaryMetrics:
    n = len(records)
    duration = run_duration(records)
    attain, goodput = attainment_and_goodput(records, duration)
    if n:
        start = min(r.arrival for r in records)
        avg_power = time_weighted_mean(power_steps, start, start + duration)
    else:
        avg_power = time_weighted_mean(power_steps, 0.0, 0.0)

    def pct(values: list[float], p: float) -> float:
        return percentile(values, p) if values else 0.0

    ttfts = [r.ttft for r in records]
    tpots = [r.tpot for r in records]
    return SummaryMetrics(
        num_requests=n,
        attained=sum(1 for r in records if r.met_both),
        attainment=attain,
        goodput=goodput,
        throughput=n / duration if duration > 0 else 0.0,
        run_duration=duration,
        ttft_p50=pct(ttfts, 50),
        ttft_p90=pct(ttfts, 90),
        ttft_p99=pct(ttfts, 99),
        tpot_p50=pct(tpots, 50),
        tpot_p90=pct(tpots, 90),
        tpot_p99=pct(tpots, 99),
        mean_queuing_delay=sum(r.queuing_delay for r in records) / n if n else 0.0,
        mean_exec_time=sum(r.exec_time for r in records) / n if n else 0.0,
        avg_provisioned_gpu_power=avg_power,
        qps_per_watt=qps_per_watt(goodput, avg_power),
        node_power_estimate=avg_power / gpu_share,
        qps_per_node_watt=qps_per_watt(goodput, avg_power, gpu_share),
    )


@dataclass(frozen=True)
class CurvePoint:
    qps_per_gpu: float
    attainment: float
    goodput: float = 0.0
    qps_per_watt: float = 0.0


def attainment_curve(points: Iterable[CurvePoint]) -> list[CurvePoint]:
    """Sweep points ordered by ascending QPS/GPU."""
    return sorted(points, key=lambda p: p.qps_per_gpu)


def max_qps_at_attainment(curve: Sequence[CurvePoint], threshold: float = 0.8) -> float | None:
    """Largest swept QPS/GPU whose attainment is at least ``threshold``."""
    best = None
    for point in curve:
        if point.attainment >= threshold and (best is None or point.qps_per_gpu > best):
            best = point.qps_per_gpu
    return best


RECORD_COLUMNS = (
    "id", "arrival_s", "input_tokens", "output_tokens", "queuing_delay_s",
    "exec_s", "ttft_s", "tpot_s", "met_ttft", "met_tpot",
)


def records_to_csv(records: Sequence[RequestRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for r in records:
        writer.writerow([
            r.id, repr(r.arrival), r.input_tokens, r.output_tokens, repr(r.queuing_delay),
            repr(r.exec_time), repr(r.ttft), repr(r.tpot), int(r.met_ttft), int(r.met_tpot),
        ])
    return buf.getvalue()


def curve_to_csv(curve: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["qps_per_gpu", "attainment", "goodput", "qps_per_watt"])
    for p in curve:
        writer.writerow([repr(p.qps_per_gpu), repr(p.attainment), repr(p.goodput), repr(p.qps_per_watt)])
    return buf.getvalue()
