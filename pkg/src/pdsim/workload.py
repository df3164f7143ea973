"""Request streams: Poisson arrivals, the two-phase synthetic mix, trace files.

Randomness comes from numpy's PCG64 bit generator. A run seed is expanded with
``numpy.random.SeedSequence(seed).spawn(3)`` into independent child streams:

    0  inter-arrival gaps
    1  shuffling (reserved; nothing shuffles today)
    2  token-length sampling

Any implementation reproducing PCG64 + SeedSequence produces the same traces.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pdsim.errors import DomainError, TraceFormatError

GAP_STREAM = 0
SHUFFLE_STREAM = 1
LENGTH_STREAM = 2

MAX_INPUT_TOKENS = 8192

MODES = ("poisson-trace", "two-phase-synthetic", "file-trace")


@dataclass(frozen=True)
class RequestSpec:
    id: int
    arrival_time: float
    input_tokens: int
    output_tokens: int

    def __post_init__(self) -> None:
        if self.arrival_time < 0:
            raise DomainError(f"request {self.id}: arrival_time must be >= 0")
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise DomainError(f"request {self.id}: token counts must be >= 1")


@dataclass(frozen=True)
class PhaseSpec:
    count: int
    input_tokens: int
    output_tokens: int
    ttft_slo: float | None = None
    tpot_slo: float | None = None


# 1000 prefill-heavy then 1000 decode-heavy requests; TPOT SLO tightens
# from 40 ms to 20 ms at the boundary, TTFT stays at 1 s.
DEFAULT_PHASES = (
    PhaseSpec(1000, 8192, 128, ttft_slo=1.0, tpot_slo=0.040),
    PhaseSpec(1000, 500, 500, ttft_slo=1.0, tpot_slo=0.020),
)


@dataclass(frozen=True)
class SloWindow:
    """SLO targets in force for requests arriving at or after ``start``."""

    start: float
    ttft: float
    tpot: float


@dataclass(frozen=True)
class WorkloadSpec:
    mode: str = "poisson-trace"
    qps_per_gpu: float = 1.5
    gpu_count: int = 8
    seed: int = 0
    num_requests: int = 2000
    # poisson-trace: lengths drawn uniformly (inclusive) from these ranges
    input_range: tuple[int, int] = (512, 8192)
    output_range: tuple[int, int] = (128, 256)
    phases: tuple[PhaseSpec, ...] = DEFAULT_PHASES
    trace_path: str | None = None
    max_input_tokens: int = MAX_INPUT_TOKENS

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise DomainError(f"unknown workload mode {self.mode!r}; expected one of {MODES}")
        if not self.qps_per_gpu > 0:
            raise DomainError("qps_per_gpu must be > 0")
        if self.gpu_count < 1:
            raise DomainError("gpu_count must be >= 1")
        if any(p.count < 1 for p in self.phases):
            raise DomainError("synthetic phase counts must be >= 1")
        lo, hi = self.input_range
        if not 1 <= lo <= hi:
            raise DomainError(f"bad input_range {self.input_range}")
        lo, hi = self.output_range
        if not 1 <= lo <= hi:
            raise DomainError(f"bad output_range {self.output_range}")

    @property
    def rate(self) -> float:
        """Aggregate arrival rate in requests/s."""
        return self.qps_per_gpu * self.gpu_count


@dataclass
class Workload:
    requests: list[RequestSpec]
    slo_schedule: list[SloWindow] = field(default_factory=list)


def _streams(seed: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(3)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def poisson_arrival_times(n: int, rate: float, seed: int) -> np.ndarray:
    """Cumulative sum of ``n`` exponential gaps with mean ``1/rate``."""
    if not rate > 0:
        raise DomainError(f"arrival rate must be > 0, got {rate}")
    gaps = _streams(seed)[GAP_STREAM].exponential(1.0 / rate, size=n)
    return np.cumsum(gaps)


def gen_poisson_arrivals(spec: WorkloadSpec, lengths: Sequence[tuple[int, int]]) -> list[RequestSpec]:
    """Attach Poisson arrival times to ``(input, output)`` length pairs, in order."""
    if len(lengths) == 0:
        raise DomainError("lengths list is empty")
    times = poisson_arrival_times(len(lengths), spec.rate, spec.seed)
    return [
        RequestSpec(i, float(t), int(inp), int(out))
        for i, (t, (inp, out)) in enumerate(zip(times, lengths))
    ]


def uniform_lengths(spec: WorkloadSpec) -> list[tuple[int, int]]:
    """Long-context mix: uniform integer input and output token counts."""
    rng = _streams(spec.seed)[LENGTH_STREAM]
    n = spec.num_requests
    inp = rng.integers(spec.input_range[0], spec.input_range[1], size=n, endpoint=True)
    out = rng.integers(spec.output_range[0], spec.output_range[1], size=n, endpoint=True)
    return [(int(a), int(b)) for a, b in zip(inp, out)]


def gen_two_phase_synthetic(spec: WorkloadSpec) -> Workload:
    """Concatenated phases with one continuous Poisson arrival process.

    All phase-1 requests arrive before any phase-2 request. The SLO schedule
    switches at the arrival time of each phase's first request.
    """
    lengths: list[tuple[int, int]] = []
    for phase in spec.phases:
        lengths.extend([(phase.input_tokens, phase.output_tokens)] * phase.count)
    requests = gen_poisson_arrivals(spec, lengths)
    schedule = []
    start_idx = 0
    for k, phase in enumerate(spec.phases):
        if phase.ttft_slo is not None and phase.tpot_slo is not None:
            start = 0.0 if k == 0 else requests[start_idx].arrival_time
            schedule.append(SloWindow(start, phase.ttft_slo, phase.tpot_slo))
        start_idx += phase.count
    return Workload(requests, schedule)


def _parse_row(row: dict[str, str | None], line: int, clamp: int) -> tuple[int, int, float | None]:
    try:
        inp = int(str(row["input_tokens"]).strip())
        out = int(str(row["output_tokens"]).strip())
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"line {line}: malformed token counts ({exc})") from exc
    if inp < 1 or out < 1:
        raise TraceFormatError(f"line {line}: zero-length record (input={inp}, output={out})")
    arrival = row.get("arrival_time")
    t: float | None = None
    if arrival not in (None, ""):
        try:
            t = float(str(arrival).strip())
        except ValueError as exc:
            raise TraceFormatError(f"line {line}: malformed arrival_time {arrival!r}") from exc
        if t < 0:
            raise TraceFormatError(f"line {line}: negative arrival_time {t}")
    return min(inp, clamp), out, t


def _read_rows(path: Path) -> Iterable[tuple[int, dict]]:
    text = path.read_text()
    if path.suffix in (".jsonl", ".ndjson"):
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise TraceFormatError(f"line {line_no}: expected an object")
            yield line_no, obj
        return
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"input_tokens", "output_tokens"} <= set(reader.fieldnames):
        raise TraceFormatError("line 1: header must contain input_tokens,output_tokens[,arrival_time]")
    for row in reader:
        if None in row:
            raise TraceFormatError(f"line {reader.line_num}: too many fields")
        yield reader.line_num, row


def load_trace(
    path: str | Path,
    qps_per_gpu: float = 1.5,
    gpu_count: int = 8,
    seed: int = 0,
    max_input_tokens: int = MAX_INPUT_TOKENS,
) -> list[RequestSpec]:
    """Read a CSV or JSONL trace.

    Input lengths above ``max_input_tokens`` are clamped. If any row lacks an
    arrival time, arrivals for the whole trace are synthesized from a Poisson
    process at ``qps_per_gpu * gpu_count``. Output is sorted by arrival and
    ids are reassigned densely in that order.
    """
    path = Path(path)
    parsed = [_parse_row(row, line, max_input_tokens) for line, row in _read_rows(path)]
    if not parsed:
        return []
    if any(t is None for _, _, t in parsed):
        spec = WorkloadSpec(qps_per_gpu=qps_per_gpu, gpu_count=gpu_count, seed=seed)
        return gen_poisson_arrivals(spec, [(i, o) for i, o, _ in parsed])
    order = sorted(range(len(parsed)), key=lambda k: (parsed[k][2], k))
    return [
        RequestSpec(new_id, parsed[k][2], parsed[k][0], parsed[k][1])  # type: ignore[arg-type]
        for new_id, k in enumerate(order)
    ]


def write_trace(requests: Sequence[RequestSpec], path: str | Path) -> None:
    """Write requests as CSV (or JSONL when the suffix is .jsonl)."""
    path = Path(path)
    if path.suffix in (".jsonl", ".ndjson"):
        lines = [
            json.dumps({"input_tokens": r.input_tokens, "output_tokens": r.output_tokens,
                        "arrival_time": r.arrival_time})
            for r in requests
        ]
        path.write_text("".join(line + "\n" for line in lines))
        return
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["input_tokens", "output_tokens", "arrival_time"])
    for r in requests:
        writer.writerow([r.input_tokens, r.output_tokens, repr(r.arrival_time)])
    path.write_text(buf.getvalue())


def build_workload(spec: WorkloadSpec) -> Workload:
    """Materialize a workload for any mode."""
    if spec.mode == "two-phase-synthetic":
        return gen_two_phase_synthetic(spec)
    if spec.mode == "file-trace":
        if not spec.trace_path:
            raise DomainError("file-trace mode needs trace_path")
        reqs = load_trace(spec.trace_path, spec.qps_per_gpu, spec.gpu_count, spec.seed, spec.max_input_tokens)
        return Workload(reqs)
    return Workload(gen_poisson_arrivals(spec, uniform_lengths(spec)))
