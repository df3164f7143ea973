"""Deterministic discrete-event simulator of one power-capped inference node.

Disaggregated mode runs prefill and decode on disjoint GPU pools:

* arrivals are routed to the prefill worker with the fewest unprocessed input
  tokens (its queue plus the unfinished share of its running batch); each worker batches FIFO under a count and token budget;
* a finished prefill takes a slot in the shared transfer buffer, and the decode
  worker with the smallest batch pulls its KV cache. The prefill worker does
  not wait for the pull; it stalls only when more of its finished requests are
  waiting for a slot than the buffer holds;
* decode workers run continuous batching, one token per active sequence per
  step, admitting new sequences between steps.

Coalesced mode runs both phases on every GPU with chunked prefill fused into
the decode step. It is a rough approximation for qualitative comparisons.

Time is kept in integer microseconds. Simultaneous events are ordered by
``(time, kind priority, worker id, request id, insertion order)``.
"""

from __future__ import annotations

import heapq
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Any, Sequence

from pdsim.controller import Action, Controller, ControllerConfig, Snapshot, WorkerView, rolling_metrics
from pdsim.errors import ConfigError, RangeError
from pdsim.metrics import RequestRecord, SummaryMetrics, make_record, records_to_csv, summarize
from pdsim.perf_model import PerfModel
from pdsim.workload import RequestSpec, SloWindow, Workload

log = logging.getLogger(__name__)

US = 1_000_000
DEVICE_TBP = 750

PREFILL = "prefill"
DECODE = "decode"
MODES = ("disaggregated", "coalesced")


def to_us(seconds: float) -> int:
    return int(round(seconds * US))


def duration_us(seconds: float) -> int:
    """Positive event duration; never zero so every step advances time."""
    return max(1, to_us(seconds))


class EventKind(IntEnum):
    CAP_SETTLE = 0
    CAP_RAISE = 1
    ROLE_FLIP = 2
    BATCH_END = 3
    TRANSFER_END = 4
    ARRIVAL = 5
    CONTROLLER_TICK = 6
    SAMPLE = 7


@dataclass
class SimConfig:
    gpu_count: int = 8
    node_power_budget: int = 4800
    mode: str = "disaggregated"
    roles: list[str] | None = None  # default: first half prefill, rest decode
    caps: list[int] | None = None  # default: budget / gpu_count
    max_prefill_batch: int = 4
    prefill_token_budget: int = 16384
    max_decode_batch: int = 64
    chunk_size: int = 512
    transfer_slots: int = 32
    settle_latency: float = 0.3
    reassign_latency: float = 3.0
    sample_period: float = 1.0
    ttft_slo: float = 1.0
    tpot_slo: float = 0.040
    seed: int = 0

    def resolved_roles(self) -> list[str]:
        if self.roles is not None:
            return list(self.roles)
        n_prefill = max(1, self.gpu_count // 2)
        return [PREFILL] * n_prefill + [DECODE] * (self.gpu_count - n_prefill)

    def resolved_caps(self) -> list[int]:
        if self.caps is not None:
            return [int(c) for c in self.caps]
        if self.gpu_count < 1:
            return []
        return [min(DEVICE_TBP, self.node_power_budget // self.gpu_count)] * self.gpu_count

    def validate(self, perf: PerfModel) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gpu_count < 1:
            raise ConfigError("gpu_count must be at least 1")
        roles, caps = self.resolved_roles(), self.resolved_caps()
        if len(roles) != self.gpu_count or len(caps) != self.gpu_count:
            raise ConfigError("roles and caps must list exactly gpu_count entries")
        if any(r not in (PREFILL, DECODE) for r in roles):
            raise ConfigError(f"roles must be 'prefill' or 'decode', got {roles}")
        if self.mode == "disaggregated" and (PREFILL not in roles or DECODE not in roles):
            raise ConfigError("disaggregated mode needs at least one prefill and one decode GPU")
        if perf.max_power > DEVICE_TBP:
            raise ConfigError(f"calibration max_power {perf.max_power} W exceeds device TBP {DEVICE_TBP} W")
        for i, c in enumerate(caps):
            if not perf.min_power <= c <= perf.max_power:
                raise ConfigError(f"gpu {i} cap {c} W outside [{perf.min_power}, {perf.max_power}]")
        if sum(caps) > self.node_power_budget:
            raise ConfigError(
                f"sum of initial caps {sum(caps)} W exceeds node_power_budget {self.node_power_budget} W"
            )
        for name in ("max_prefill_batch", "prefill_token_budget", "max_decode_batch", "chunk_size",
                     "transfer_slots"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.settle_latency < 0 or self.reassign_latency < 0 or not self.sample_period > 0:
            raise ConfigError("latencies must be >= 0 and sample_period > 0")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["roles"] = self.resolved_roles()
        d["caps"] = self.resolved_caps()
        return d


@dataclass
class Request:
    spec: RequestSpec
    state: str = "queued-prefill"
    prefill_enqueue: int | None = None
    prefill_start: int | None = None
    prefill_end: int | None = None
    transfer_start: int | None = None
    transfer_end: int | None = None
    decode_join: int | None = None
    completion: int | None = None
    tokens_emitted: int = 0
    prefill_worker: int | None = None
    decode_worker: int | None = None
    remaining_prefill: int = 0  # coalesced mode chunking

    @property
    def id(self) -> int:
        return self.spec.id


@dataclass
class GpuWorker:
    id: int
    role: str
    effective_cap: int
    commanded_cap: int
    cap_settle_deadline: int | None = None
    prefill_queue: deque = field(default_factory=deque)
    active_decode_batch: list = field(default_factory=list)
    pending_join: list = field(default_factory=list)
    incoming: int = 0  # decode slots reserved by in-flight transfers
    draining: bool = False
    pending_role: str | None = None
    flip_scheduled: bool = False
    busy_until: int = 0
    current_batch: list | None = None
    batch_start: int = 0
    chunk: int = 0  # coalesced: prefill tokens in the running step
    stepping: bool = False
    unslotted: int = 0  # finished prefills from this worker waiting for a buffer slot

    @property
    def queued_tokens(self) -> int:
        return sum(r.spec.input_tokens for r in self.prefill_queue)

    def unprocessed_tokens(self, now: int) -> float:
        """Queued tokens plus the not-yet-processed share of the running batch."""
        if not self.current_batch:
            return float(self.queued_tokens)
        running = sum(r.spec.input_tokens for r in self.current_batch)
        span = self.busy_until - self.batch_start
        left = (self.busy_until - now) / span if span > 0 else 0.0
        return self.queued_tokens + running * left

    @property
    def decode_load(self) -> int:
        return len(self.active_decode_batch) + len(self.pending_join) + self.incoming


@dataclass
class TransferBuffer:
    capacity: int = 32
    occupied: list = field(default_factory=list)  # (request id, ready_time_us)

    @property
    def free(self) -> int:
        return self.capacity - len(self.occupied)

    def occupy(self, rid: int, ready_time: int) -> None:
        if self.free <= 0:
            raise RuntimeError("transfer buffer overflow")
        self.occupied.append((rid, ready_time))

    def release(self, rid: int) -> None:
        for i, (r, _) in enumerate(self.occupied):
            if r == rid:
                del self.occupied[i]
                return
        raise KeyError(rid)


def route_request(loads: Sequence[int], eligible: Sequence[bool]) -> int:
    """Index of the eligible worker with the smallest load; ties go to the lowest index."""
    best = None
    for i, (load, ok) in enumerate(zip(loads, eligible)):
        if ok and (best is None or load < loads[best]):
            best = i
    if best is None:
        raise ConfigError("no eligible prefill worker")
    return best


def form_prefill_batch(queue_tokens: Sequence[int], max_batch: int, token_budget: int) -> int:
    """Number of queue-head requests to batch.

    Requests are taken FIFO while the count stays within ``max_batch`` and the
    token sum within ``token_budget``. A head request larger than the budget
    still runs alone.
    """
    n, total = 0, 0
    for tokens in queue_tokens:
        if n >= max_batch or (n > 0 and total + tokens > token_budget):
            break
        n += 1
        total += tokens
    return n


@dataclass
class SimResult:
    config: SimConfig
    controller: ControllerConfig
    requests: list[Request]
    records: list[RequestRecord]
    summary: SummaryMetrics
    trace: list[dict]
    timeseries: list[dict]
    power_steps: list[tuple[float, float]]

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":")) + "\n" for e in self.trace)

    def records_csv(self) -> str:
        return records_to_csv(self.records)

    def timeseries_csv(self) -> str:
        if not self.timeseries:
            return ""
        cols = list(self.timeseries[0])
        lines = [",".join(cols)]
        for row in self.timeseries:
            lines.append(",".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)


class Simulation:
    """One simulation instance; single-threaded and owns all of its state."""

    def __init__(
        self,
        config: SimConfig,
        workload: Sequence[RequestSpec],
        controller: ControllerConfig | None = None,
        perf: PerfModel | None = None,
        slo_schedule: Sequence[SloWindow] | None = None,
    ):
        self.perf = perf or PerfModel()
        self.config = config
        config.validate(self.perf)
        self.controller_config = controller or ControllerConfig()
        if config.mode == "coalesced" and self.controller_config.policy != "static":
            raise ConfigError("coalesced mode supports only the static policy")
        for a, b in zip(workload, workload[1:]):
            if b.arrival_time < a.arrival_time:
                raise ConfigError("workload must be sorted by arrival_time")
        ids = [r.id for r in workload]
        if len(set(ids)) != len(ids):
            raise ConfigError("request ids must be unique")
        self.controller = Controller(self.controller_config)
        self.slo_schedule = sorted(slo_schedule or [SloWindow(0.0, config.ttft_slo, config.tpot_slo)],
                                   key=lambda w: w.start)
        self.requests = [Request(spec) for spec in workload]
        self._by_id = {r.id: r for r in self.requests}
        self.workers = [
            GpuWorker(i, role, cap, cap)
            for i, (role, cap) in enumerate(zip(config.resolved_roles(), config.resolved_caps()))
        ]
        self.buffer = TransferBuffer(config.transfer_slots)
        self.slotted: deque[Request] = deque()  # holding a slot, waiting for a decode puller
        self.unslotted: deque[Request] = deque()  # waiting for a slot
        self.pending_raises: dict[int, int] = {}
        self.now = 0
        self.done = 0
        self._heap: list = []
        self._seq = 0
        self.trace: list[dict] = []
        self.timeseries: list[dict] = []
        self.power_steps: list[tuple[float, float]] = []
        self._ttft_window: deque = deque()
        self._tpot_window: deque = deque()
        self._prefill_done_window: deque = deque()
        self._decode_done_window: deque = deque()
        self._settle_us = to_us(config.settle_latency)
        self._reassign_us = to_us(config.reassign_latency)
        self._tick_us = duration_us(self.controller_config.tick_period)
        self._sample_us = duration_us(config.sample_period)
        self._window_us = to_us(self.controller_config.metric_window)
        self._started = False
        self._handlers = {
            EventKind.CAP_SETTLE: self._on_cap_settle,
            EventKind.CAP_RAISE: self._on_cap_raise,
            EventKind.ROLE_FLIP: self._on_role_flip,
            EventKind.BATCH_END: self._on_batch_end,
            EventKind.TRANSFER_END: self._on_transfer_end,
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.CONTROLLER_TICK: self._on_tick,
            EventKind.SAMPLE: self._on_sample,
        }

    # -- event plumbing -------------------------------------------------

    def _push(self, t: int, kind: EventKind, worker: int = -1, rid: int = -1, payload: Any = None) -> None:
        heapq.heappush(self._heap, (t, int(kind), worker, rid, self._seq, payload))
        self._seq += 1

    def _emit(self, kind: str, **fields: Any) -> None:
        self.trace.append({"t_us": self.now, "kind": kind, **fields})

    def _record_power(self) -> None:
        total = sum(w.effective_cap for w in self.workers)
        self.power_steps.append((self.now / US, float(total)))

    @property
    def finished(self) -> bool:
        return self.done == len(self.requests)

    # -- main loop ------------------------------------------------------

    def start(self) -> None:
        """Emit the init event and seed the queue; ``step`` then advances time."""
        if self._started:
            raise RuntimeError("simulation already started")
        self._started = True
        self._emit(
            "init",
            mode=self.config.mode,
            budget=self.config.node_power_budget,
            policy=self.controller_config.policy,
            roles=[w.role for w in self.workers],
            caps=[w.effective_cap for w in self.workers],
        )
        self._record_power()
        for r in self.requests:
            self._push(to_us(r.spec.arrival_time), EventKind.ARRIVAL, -1, r.id)
        self._push(0, EventKind.SAMPLE)
        if self.controller_config.policy != "static" and self.requests:
            self._push(self._tick_us, EventKind.CONTROLLER_TICK)

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        """Process one event; False once the queue is empty."""
        if not self._heap:
            return False
        t, kind, worker, rid, _, payload = heapq.heappop(self._heap)
        if t < self.now:
            raise RuntimeError("event scheduled in the past")
        self.now = t
        self._handlers[EventKind(kind)](worker, rid, payload)
        return True

    def run(self) -> SimResult:
        if not self._started:
            self.start()
        while self.step():
            pass
        if not self.finished:
            raise RuntimeError(f"simulation stalled with {len(self.requests) - self.done} requests unfinished")
        if not self.timeseries or self.timeseries[-1]["t_s"] != self.now / US:
            self._sample()
        return self._result()

    def _result(self) -> SimResult:
        records = []
        for r in self.requests:
            slo = self.slo_for(r.spec.arrival_time)
            records.append(make_record(
                r.id, r.spec.input_tokens, r.spec.output_tokens, r.prefill_enqueue, r.prefill_start,
                r.prefill_end, r.completion, slo,
            ))
        summary = summarize(records, self.power_steps)
        return SimResult(self.config, self.controller_config, self.requests, records, summary,
                         self.trace, self.timeseries, self.power_steps)

    def slo_for(self, t: float) -> tuple[float, float]:
        current = self.slo_schedule[0]
        for w in self.slo_schedule:
            if w.start <= t:
                current = w
        return current.ttft, current.tpot

    # -- arrivals and prefill --------------------------------------------

    def _on_arrival(self, _w: int, rid: int, _p: Any) -> None:
        r = self._by_id[rid]
        r.prefill_enqueue = self.now
        self._emit("arrival", req=rid, input_tokens=r.spec.input_tokens, output_tokens=r.spec.output_tokens)
        if self.config.mode == "coalesced":
            r.remaining_prefill = r.spec.input_tokens
            w = self.workers[route_request([x.queued_tokens for x in self.workers],
                                           [True] * len(self.workers))]
            r.prefill_worker = w.id
            w.prefill_queue.append(r)
            self._start_coalesced_step(w)
            return
        w = self.route(r)
        w.prefill_queue.append(r)
        self._try_start_prefill(w)

    def route(self, r: Request) -> GpuWorker:
        wid = route_request(
            [w.unprocessed_tokens(self.now) for w in self.workers],
            [w.role == PREFILL and not w.draining for w in self.workers],
        )
        r.prefill_worker = wid
        return self.workers[wid]

    def _try_start_prefill(self, w: GpuWorker) -> None:
        if w.role != PREFILL or w.draining or w.current_batch or not w.prefill_queue:
            return
        if w.unslotted > self.buffer.capacity:
            return
        n = form_prefill_batch([r.spec.input_tokens for r in w.prefill_queue],
                               self.config.max_prefill_batch, self.config.prefill_token_budget)
        batch = [w.prefill_queue.popleft() for _ in range(n)]
        tokens = sum(r.spec.input_tokens for r in batch)
        dur = duration_us(self.perf.prefill_latency(tokens, n, w.effective_cap))
        for r in batch:
            r.prefill_start = self.now
            r.state = "prefilling"
        w.current_batch = batch
        w.batch_start = self.now
        w.busy_until = self.now + dur
        self._emit("prefill_start", gpu=w.id, reqs=[r.id for r in batch], tokens=tokens,
                   cap=w.effective_cap, dur_us=dur)
        self._push(w.busy_until, EventKind.BATCH_END, w.id)

    def _on_batch_end(self, wid: int, _r: int, _p: Any) -> None:
        w = self.workers[wid]
        if self.config.mode == "coalesced":
            self._end_coalesced_step(w)
        elif w.current_batch is not None:
            self._end_prefill(w)
        else:
            self._end_decode_step(w)

    def _end_prefill(self, w: GpuWorker) -> None:
        batch = w.current_batch
        w.current_batch = None
        for r in batch:
            r.prefill_end = self.now
            r.tokens_emitted = 1
            r.state = "awaiting-transfer"
            self._note_first_token(r)
            if self.buffer.free > 0:
                self.buffer.occupy(r.id, self.now)
                self.slotted.append(r)
            else:
                self.unslotted.append(r)
                w.unslotted += 1
        self._emit("prefill_end", gpu=w.id, reqs=[r.id for r in batch])
        self._dispatch_transfers()
        if w.draining:
            self._check_drain(w)
        else:
            self._try_start_prefill(w)

    def _note_first_token(self, r: Request) -> None:
        ttft = (r.prefill_end - r.prefill_enqueue) / US
        self._ttft_window.append((self.now, ttft))
        self._prefill_done_window.append(self.now)

    # -- KV handoff -------------------------------------------------------

    def _pick_decode_worker(self) -> GpuWorker | None:
        best = None
        for w in self.workers:
            if w.role != DECODE or w.draining or w.decode_load >= self.config.max_decode_batch:
                continue
            if best is None or w.decode_load < best.decode_load:
                best = w
        return best

    def _dispatch_transfers(self) -> None:
        while self.slotted:
            dw = self._pick_decode_worker()
            if dw is None:
                return
            r = self.slotted.popleft()
            r.transfer_start = self.now
            r.state = "in-transfer"
            r.decode_worker = dw.id
            dw.incoming += 1
            dur = duration_us(self.perf.kv_transfer_latency(r.spec.input_tokens))
            self._emit("transfer_start", req=r.id, src=r.prefill_worker, dst=dw.id, dur_us=dur)
            self._push(self.now + dur, EventKind.TRANSFER_END, dw.id, r.id)

    def _on_transfer_end(self, wid: int, rid: int, _p: Any) -> None:
        dw = self.workers[wid]
        r = self._by_id[rid]
        self.buffer.release(rid)
        dw.incoming -= 1
        r.transfer_end = self.now
        self._emit("transfer_end", req=rid, gpu=wid)
        if r.spec.output_tokens == 1:
            r.decode_join = self.now
            self._complete(r)
        else:
            r.decode_join = self.now
            r.state = "decoding"
            dw.pending_join.append(r)
        while self.buffer.free > 0 and self.unslotted:
            nxt = self.unslotted.popleft()
            self.buffer.occupy(nxt.id, nxt.prefill_end)
            self.slotted.append(nxt)
            src = self.workers[nxt.prefill_worker]
            src.unslotted -= 1
            self._try_start_prefill(src)
        self._dispatch_transfers()
        self._start_decode_step(dw)
        if dw.draining:
            self._check_drain(dw)

    # -- decode -----------------------------------------------------------

    def _start_decode_step(self, w: GpuWorker) -> None:
        if w.stepping:
            return
        room = self.config.max_decode_batch - len(w.active_decode_batch)
        if room > 0 and w.pending_join:
            w.active_decode_batch.extend(w.pending_join[:room])
            del w.pending_join[:room]
        if not w.active_decode_batch:
            return
        dur = duration_us(self.perf.decode_step_latency(len(w.active_decode_batch), w.effective_cap))
        w.stepping = True
        w.busy_until = self.now + dur
        self._push(w.busy_until, EventKind.BATCH_END, w.id)

    def _end_decode_step(self, w: GpuWorker) -> None:
        w.stepping = False
        still = []
        for r in w.active_decode_batch:
            r.tokens_emitted += 1
            if r.tokens_emitted >= r.spec.output_tokens:
                self._complete(r)
            else:
                still.append(r)
        w.active_decode_batch = still
        self._dispatch_transfers()
        self._start_decode_step(w)
        if w.draining:
            self._check_drain(w)

    def _complete(self, r: Request) -> None:
        r.completion = self.now
        r.state = "done"
        self.done += 1
        if r.spec.output_tokens > 1:
            tpot = (r.completion - r.prefill_end) / US / (r.spec.output_tokens - 1)
        else:
            tpot = 0.0
        self._tpot_window.append((self.now, tpot))
        self._decode_done_window.append(self.now)
        self._emit("complete", req=r.id)

    # -- coalesced mode ---------------------------------------------------

    def _start_coalesced_step(self, w: GpuWorker) -> None:
        if w.stepping:
            return
        latency = 0.0
        w.chunk = 0
        if w.prefill_queue:
            head = w.prefill_queue[0]
            if head.prefill_start is None:
                head.prefill_start = self.now
                head.state = "prefilling"
            w.chunk = min(self.config.chunk_size, head.remaining_prefill)
            latency += self.perf.prefill_latency(w.chunk, 1, w.effective_cap)
        room = self.config.max_decode_batch - len(w.active_decode_batch)
        if room > 0 and w.pending_join:
            w.active_decode_batch.extend(w.pending_join[:room])
            del w.pending_join[:room]
        if w.active_decode_batch:
            latency += self.perf.decode_step_latency(len(w.active_decode_batch), w.effective_cap)
        if latency == 0.0:
            return
        w.stepping = True
        w.busy_until = self.now + duration_us(latency)
        self._push(w.busy_until, EventKind.BATCH_END, w.id)

    def _end_coalesced_step(self, w: GpuWorker) -> None:
        w.stepping = False
        still = []
        for r in w.active_decode_batch:
            r.tokens_emitted += 1
            if r.tokens_emitted >= r.spec.output_tokens:
                self._complete(r)
            else:
                still.append(r)
        w.active_decode_batch = still
        if w.chunk:
            head = w.prefill_queue[0]
            head.remaining_prefill -= w.chunk
            if head.remaining_prefill <= 0:
                w.prefill_queue.popleft()
                head.prefill_end = head.transfer_start = head.transfer_end = head.decode_join = self.now
                head.tokens_emitted = 1
                head.decode_worker = w.id
                self._note_first_token(head)
                self._emit("prefill_end", gpu=w.id, reqs=[head.id])
                if head.spec.output_tokens == 1:
                    self._complete(head)
                else:
                    head.state = "decoding"
                    w.pending_join.append(head)
        self._start_coalesced_step(w)

    # -- power caps -------------------------------------------------------

    def apply_cap_command(self, w: GpuWorker, new_cap: int) -> None:
        """Command a cap. Decreases take effect after the settle latency, and the
        GPU is charged its old cap until then; increases apply immediately."""
        if not self.perf.min_power <= new_cap <= self.perf.max_power:
            raise RangeError(f"cap {new_cap} W outside [{self.perf.min_power}, {self.perf.max_power}]")
        old = w.commanded_cap
        if new_cap == old:
            return
        w.commanded_cap = new_cap
        if new_cap < w.effective_cap:
            deadline = self.now + self._settle_us
            w.cap_settle_deadline = deadline
            self._emit("cap_command", gpu=w.id, old=old, new=new_cap, effective_at_us=deadline)
            self._push(deadline, EventKind.CAP_SETTLE, w.id)
        else:
            w.effective_cap = new_cap
            w.cap_settle_deadline = None
            self._emit("cap_command", gpu=w.id, old=old, new=new_cap, effective_at_us=self.now)
            self._record_power()

    def command_caps(self, targets: dict[int, int]) -> None:
        """Lower donors first; raise recipients once every donor has settled."""
        decreases = {i: c for i, c in sorted(targets.items()) if c < self.workers[i].commanded_cap}
        increases = {i: c for i, c in sorted(targets.items()) if c > self.workers[i].commanded_cap}
        for i, c in decreases.items():
            self.apply_cap_command(self.workers[i], c)
        if not increases:
            return
        deadlines = [w.cap_settle_deadline for w in self.workers if w.cap_settle_deadline is not None]
        if deadlines:
            self.pending_raises.update(increases)
            self._push(max(deadlines), EventKind.CAP_RAISE)
        else:
            for i, c in increases.items():
                self.apply_cap_command(self.workers[i], c)

    def _on_cap_settle(self, wid: int, _r: int, _p: Any) -> None:
        w = self.workers[wid]
        if w.cap_settle_deadline != self.now:
            return
        w.effective_cap = w.commanded_cap
        w.cap_settle_deadline = None
        self._emit("cap_settle", gpu=wid, cap=w.effective_cap)
        self._record_power()

    def _on_cap_raise(self, _w: int, _r: int, _p: Any) -> None:
        if any(w.cap_settle_deadline is not None for w in self.workers):
            deadline = max(w.cap_settle_deadline for w in self.workers if w.cap_settle_deadline is not None)
            self._push(deadline, EventKind.CAP_RAISE)
            return
        raises, self.pending_raises = self.pending_raises, {}
        for i, c in sorted(raises.items()):
            self.apply_cap_command(self.workers[i], c)

    # -- role changes -----------------------------------------------------

    def reassign_role(self, w: GpuWorker, new_role: str) -> None:
        """Drain ``w`` and flip it to ``new_role`` after the reassignment latency."""
        if new_role == w.role or w.draining:
            raise ConfigError(f"gpu {w.id} cannot be reassigned to {new_role}")
        remaining = [x for x in self.workers if x.role == w.role and not x.draining and x is not w]
        if not remaining:
            raise ConfigError(f"reassigning gpu {w.id} would leave no {w.role} workers")
        w.draining = True
        w.pending_role = new_role
        self._emit("role_drain", gpu=w.id, old=w.role, new=new_role)
        if w.role == PREFILL:
            moved = list(w.prefill_queue)
            w.prefill_queue.clear()
            targets = []
            for r in moved:
                target = self.route(r)
                target.prefill_queue.append(r)
                targets.append(target)
            for target in sorted(set(x.id for x in targets)):
                self._try_start_prefill(self.workers[target])
        self._check_drain(w)

    def _check_drain(self, w: GpuWorker) -> None:
        if not w.draining or w.flip_scheduled:
            return
        if w.role == PREFILL:
            idle = w.current_batch is None and not w.prefill_queue
        else:
            idle = not w.stepping and not w.active_decode_batch and not w.pending_join and w.incoming == 0
        if idle:
            w.flip_scheduled = True
            self._push(self.now + self._reassign_us, EventKind.ROLE_FLIP, w.id)

    def _on_role_flip(self, wid: int, _r: int, _p: Any) -> None:
        w = self.workers[wid]
        old = w.role
        w.role = w.pending_role
        w.pending_role = None
        w.draining = False
        w.flip_scheduled = False
        self._emit("role_flip", gpu=wid, old=old, new=w.role)
        if w.role == PREFILL:
            self._try_start_prefill(w)
        else:
            self._dispatch_transfers()

    # -- controller -------------------------------------------------------

    def snapshot(self) -> Snapshot:
        window_s = self._window_us / US if self._window_us else 1.0
        return Snapshot(
            workers=tuple(
                WorkerView(w.id, w.role, w.commanded_cap, w.draining, len(w.prefill_queue), w.queued_tokens,
                           len(w.active_decode_batch))
                for w in self.workers
            ),
            budget=self.config.node_power_budget,
            settles_pending=bool(self.pending_raises) or any(
                w.cap_settle_deadline is not None for w in self.workers),
            role_change_pending=any(w.draining for w in self.workers),
            rate_prefill=len(self._prefill_done_window) / window_s,
            rate_decode=len(self._decode_done_window) / window_s,
        )

    def _prune_windows(self) -> None:
        lo = self.now - self._window_us
        for dq in (self._ttft_window, self._tpot_window):
            while dq and dq[0][0] < lo:
                dq.popleft()
        for dq in (self._prefill_done_window, self._decode_done_window):
            while dq and dq[0] < lo:
                dq.popleft()

    def _on_tick(self, _w: int, _r: int, _p: Any) -> None:
        if self.finished:
            return
        self._prune_windows()
        ttft, tpot = rolling_metrics(self._ttft_window, self._tpot_window, self.now, self._window_us,
                                     self.controller_config.metric_statistic)
        snap = self.snapshot()
        action = self.controller.tick(snap, ttft, tpot, self.now / US, self.slo_for(self.now / US))
        self._apply_action(action, snap, ttft, tpot)
        self._push(self.now + self._tick_us, EventKind.CONTROLLER_TICK)

    def _apply_action(self, action: Action, snap: Snapshot, ttft: float, tpot: float) -> None:
        if action.kind == "none":
            if action.saturated:
                self._emit("saturated", direction=action.direction)
            return
        metrics = {"ttft": ttft, "tpot": tpot, "prefill_queue": snap.prefill_queue}
        if action.kind == "move-power":
            self._emit("move_power", direction=action.direction, freed_w=action.freed_watts,
                       targets={str(k): v for k, v in sorted(action.cap_targets.items())}, **metrics)
            self.command_caps(action.cap_targets)
            return
        w = self.workers[action.worker]
        self._emit("move_gpu", direction=action.direction, gpu=w.id, new_role=action.new_role,
                   limits_reached=action.limits_reached, **metrics)
        self.reassign_role(w, action.new_role)
        cap = next(iter(action.cap_targets.values()))
        self._emit("distribute_uniform", cap=cap)
        self.command_caps(action.cap_targets)

    # -- sampling ---------------------------------------------------------

    def _sample(self) -> None:
        window_s = self._window_us / US if self._window_us else 1.0
        self._prune_windows()
        row: dict[str, Any] = {"t_s": self.now / US}
        for w in self.workers:
            row[f"gpu{w.id}_role"] = w.role
            row[f"gpu{w.id}_cap_w"] = w.effective_cap
            row[f"gpu{w.id}_queue_len"] = len(w.prefill_queue)
            row[f"gpu{w.id}_active_batch"] = len(w.active_decode_batch)
        row["total_cap_w"] = sum(w.effective_cap for w in self.workers)
        row["rate_prefill"] = len(self._prefill_done_window) / window_s
        row["rate_decode"] = len(self._decode_done_window) / window_s
        self.timeseries.append(row)

    def _on_sample(self, _w: int, _r: int, _p: Any) -> None:
        self._sample()
        if not self.finished:
            self._push(self.now + self._sample_us, EventKind.SAMPLE)


def run_simulation(
    config: SimConfig,
    workload: Workload | Sequence[RequestSpec],
    controller: ControllerConfig | None = None,
    perf: PerfModel | None = None,
    slo_schedule: Sequence[SloWindow] | None = None,
) -> SimResult:
    """Run one simulation to completion and return records, trace and time series."""
    if isinstance(workload, Workload):
        slo_schedule = slo_schedule or workload.slo_schedule or None
        workload = workload.requests
    return Simulation(config, list(workload), controller, perf, slo_schedule).run()
