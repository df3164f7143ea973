"""Offline checks over an exported event trace.

Everything here reads only the list of trace events (as written to JSONL), so
the checks are independent of the engine's in-memory state. Each function
returns a list of human-readable violations; an empty list means the trace
passed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

ACTION_KINDS = ("move_power", "move_gpu")


@dataclass
class _NodeState:
    roles: list[str]
    commanded: list[int]
    charged: list[int]
    draining: list[bool] = field(default_factory=list)

    @classmethod
    def from_init(cls, init: dict) -> "_NodeState":
        n = len(init["roles"])
        return cls(list(init["roles"]), list(init["caps"]), list(init["caps"]), [False] * n)

    def apply(self, e: dict) -> None:
        kind = e["kind"]
        if kind == "cap_command":
            g = e["gpu"]
            self.commanded[g] = e["new"]
            if e["effective_at_us"] <= e["t_us"]:
                self.charged[g] = e["new"]
        elif kind == "cap_settle":
            self.charged[e["gpu"]] = e["cap"]
        elif kind == "role_drain":
            self.draining[e["gpu"]] = True
        elif kind == "role_flip":
            self.roles[e["gpu"]] = e["new"]
            self.draining[e["gpu"]] = False

    def caps_of(self, role: str) -> list[int]:
        return [c for c, r, d in zip(self.commanded, self.roles, self.draining) if r == role and not d]


def _init(trace: list[dict]) -> dict:
    if not trace or trace[0]["kind"] != "init":
        raise ValueError("trace must start with an init event")
    return trace[0]


def audit_budget(trace: list[dict]) -> list[str]:
    """Sum of charged caps never exceeds the node budget.

    A GPU whose cap is being lowered is charged its old cap until the
    matching settle event.
    """
    init = _init(trace)
    budget = init["budget"]
    state = _NodeState.from_init(init)
    out = []
    if sum(state.charged) > budget:
        out.append(f"t=0: initial caps {sum(state.charged)} W exceed budget {budget} W")
    for e in trace[1:]:
        state.apply(e)
        total = sum(state.charged)
        if total > budget:
            out.append(f"t_us={e['t_us']}: charged {total} W exceeds budget {budget} W after {e['kind']}")
    return out


def audit_time_order(trace: list[dict]) -> list[str]:
    return [
        f"event {i} at t_us={b['t_us']} precedes previous t_us={a['t_us']}"
        for i, (a, b) in enumerate(zip(trace, trace[1:]), start=1)
        if b["t_us"] < a["t_us"]
    ]


def _limits_reached(direction: str, prefill: list[int], decode: list[int], min_p: int, max_p: int,
                    decode_ceiling: int) -> bool:
    if direction == "decode->prefill":
        return all(c >= max_p for c in prefill) or all(c <= min_p for c in decode)
    return all(c >= decode_ceiling for c in decode) or all(c <= min_p for c in prefill)


def audit_controller(
    trace: list[dict],
    cooldown: float,
    min_p: int = 400,
    max_p: int = 750,
    decode_ceiling: int = 600,
) -> list[str]:
    """Check the reallocation discipline recorded in a trace.

    (i)   consecutive actions are more than ``cooldown`` seconds apart;
    (ii)  every GPU move happens with power limits reached in its direction
          (dyn-gpu runs have no power axis, so instead no power move may appear);
    (iii) after a GPU move the caps settle to a uniform budget / gpu_count;
    (iv)  each role keeps between 1 and N-1 GPUs;
    (v)   dyn-power traces hold no role changes and static traces no cap changes;
    plus: every cap raise happens only once no lowered cap is still settling.
    """
    init = _init(trace)
    policy = init.get("policy", "static")
    n = len(init["roles"])
    uniform = max(min_p, min(max_p, init["budget"] // n))
    state = _NodeState.from_init(init)
    out: list[str] = []
    cooldown_us = round(cooldown * 1_000_000)
    last_action: int | None = None
    expect_uniform = False

    def check_uniform(t: int) -> None:
        if any(c != uniform for c in state.commanded) or any(c != uniform for c in state.charged):
            out.append(f"t_us={t}: caps {state.charged} not uniform {uniform} W after move_gpu")

    for e in trace[1:]:
        kind, t = e["kind"], e["t_us"]
        if kind in ACTION_KINDS:
            if expect_uniform:
                check_uniform(t)
                expect_uniform = False
            if last_action is not None and t - last_action <= cooldown_us:
                out.append(f"t_us={t}: {kind} only {(t - last_action) / 1e6:.3f}s after previous action")
            last_action = t
        if kind == "move_gpu":
            if policy == "dyn-gpu":
                pass
            elif not _limits_reached(e["direction"], state.caps_of("prefill"), state.caps_of("decode"),
                                     min_p, max_p, decode_ceiling):
                out.append(f"t_us={t}: move_gpu {e['direction']} without power limits reached")
            if policy == "dyn-power":
                out.append(f"t_us={t}: move_gpu in a dyn-power run")
            expect_uniform = True
        if kind == "move_power" and policy in ("dyn-gpu", "static"):
            out.append(f"t_us={t}: move_power in a {policy} run")
        if kind in ("role_drain", "role_flip") and policy in ("dyn-power", "static"):
            out.append(f"t_us={t}: {kind} in a {policy} run")
        if kind == "cap_command":
            if policy == "static":
                out.append(f"t_us={t}: cap_command in a static run")
            if e["new"] > e["old"]:
                settling = [g for g in range(n) if state.charged[g] > state.commanded[g]]
                if settling:
                    out.append(f"t_us={t}: raise on gpu {e['gpu']} while gpus {settling} still settling")
        state.apply(e)
        if kind == "role_flip":
            n_prefill = state.roles.count("prefill")
            if not 1 <= n_prefill <= n - 1:
                out.append(f"t_us={t}: {n_prefill} prefill GPUs outside [1, {n - 1}]")
    if expect_uniform:
        check_uniform(trace[-1]["t_us"])
    return out


def audit_lifecycle(requests) -> list[str]:
    """Timestamps of each finished request are non-decreasing in lifecycle order."""
    out = []
    for r in requests:
        stamps = [r.prefill_enqueue, r.prefill_start, r.prefill_end, r.transfer_start, r.transfer_end,
                  r.decode_join, r.completion]
        if any(s is None for s in stamps):
            out.append(f"request {r.id}: missing timestamps {stamps}")
            continue
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            out.append(f"request {r.id}: non-monotone timestamps {stamps}")
        if r.prefill_enqueue != round(r.spec.arrival_time * 1_000_000):
            out.append(f"request {r.id}: enqueue differs from arrival")
        if r.state != "done" or r.tokens_emitted != r.spec.output_tokens:
            out.append(f"request {r.id}: state {r.state}, {r.tokens_emitted}/{r.spec.output_tokens} tokens")
    return out
