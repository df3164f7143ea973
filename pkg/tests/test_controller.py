from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdsim import ConfigError
from pdsim.controller import (
    DECODE_TO_PREFILL,
    PREFILL_TO_DECODE,
    Controller,
    ControllerConfig,
    Snapshot,
    WorkerView,
    move_power,
    power_limits_reached,
    rolling_metrics,
    select_gpu_donor,
    uniform_cap,
)

CFG = ControllerConfig(policy="dyn-both")


def pool(n_prefill, prefill_cap, n_decode, decode_cap, queued=0):
    ws = [WorkerView(i, "prefill", prefill_cap, queued_requests=queued) for i in range(n_prefill)]
    ws += [WorkerView(n_prefill + i, "decode", decode_cap) for i in range(n_decode)]
    return tuple(ws)


def snap(workers, **kw):
    return Snapshot(workers, 4800, **kw)


def test_config_invariants():
    with pytest.raises(ConfigError):
        ControllerConfig(decode_dynamic_ceiling=800)
    with pytest.raises(ConfigError):
        ControllerConfig(cooldown=0.2, tick_period=0.25)
    with pytest.raises(ConfigError):
        ControllerConfig(power_step=0)
    with pytest.raises(ConfigError):
        ControllerConfig(policy="greedy")


def test_tick_prefill_pressure_moves_power():
    c = Controller(CFG)
    action = c.tick(snap(pool(4, 600, 4, 600, queued=3)), ttft=1.4, tpot=0.018, now=5.0)
    assert action.kind == "move-power" and action.direction == DECODE_TO_PREFILL
    assert c.last_move_time == 5.0


def test_tick_both_violated_is_none():
    c = Controller(CFG)
    assert c.tick(snap(pool(4, 600, 4, 600, queued=3)), ttft=1.4, tpot=0.05, now=5.0).kind == "none"


def test_tick_respects_cooldown():
    c = Controller(CFG)
    c.last_move_time = 4.0
    assert c.tick(snap(pool(4, 600, 4, 600, queued=3)), ttft=1.4, tpot=0.018, now=5.0).kind == "none"
    # Exactly cooldown apart still blocks; strictly more is allowed.
    assert c.tick(snap(pool(4, 600, 4, 600, queued=3)), ttft=1.4, tpot=0.018, now=8.0).kind == "none"
    assert c.tick(snap(pool(4, 600, 4, 600, queued=3)), ttft=1.4, tpot=0.018, now=8.25).kind == "move-power"


def test_tick_needs_queue_over_threshold():
    c = Controller(CFG)
    # 4 workers x 2 queued = 8, not > 8.
    assert c.tick(snap(pool(4, 600, 4, 600, queued=2)), ttft=1.4, tpot=0.018, now=5.0).kind == "none"


def test_tick_decode_pressure():
    c = Controller(CFG)
    a = c.tick(snap(pool(4, 600, 4, 450)), ttft=0.5, tpot=0.05, now=5.0)
    assert a.kind == "move-power" and a.direction == PREFILL_TO_DECODE


def test_tick_waits_for_pending_settles_and_role_changes():
    c = Controller(CFG)
    busy = pool(4, 600, 4, 600, queued=3)
    assert c.tick(snap(busy, settles_pending=True), 1.4, 0.018, 5.0).kind == "none"
    assert c.tick(snap(busy, role_change_pending=True), 1.4, 0.018, 5.0).kind == "none"


def test_static_never_acts():
    c = Controller(ControllerConfig(policy="static"))
    assert c.tick(snap(pool(4, 600, 4, 600, queued=30)), 5.0, 0.001, 100.0).kind == "none"


def test_move_power_4p4d():
    plan = move_power(DECODE_TO_PREFILL, pool(4, 600, 4, 600), CFG)
    assert plan.freed_watts == 200
    assert plan.donor_targets == {4: 550, 5: 550, 6: 550, 7: 550}
    assert plan.recipient_targets == {0: 650, 1: 650, 2: 650, 3: 650}


def test_move_power_5p3d():
    plan = move_power(DECODE_TO_PREFILL, pool(5, 600, 3, 600), CFG)
    assert plan.freed_watts == 150
    assert set(plan.recipient_targets.values()) == {630}


def test_move_power_limits():
    assert move_power(DECODE_TO_PREFILL, pool(4, 750, 4, 450), CFG) is None
    assert move_power(PREFILL_TO_DECODE, pool(4, 600, 4, 600), CFG) is None


def test_power_limits_reached_cases():
    assert power_limits_reached(DECODE_TO_PREFILL, [750] * 4, [450] * 4, CFG)
    assert power_limits_reached(DECODE_TO_PREFILL, [600] * 4, [400] * 4, CFG)
    assert not power_limits_reached(DECODE_TO_PREFILL, [600] * 4, [600] * 4, CFG)
    assert power_limits_reached(PREFILL_TO_DECODE, [600] * 4, [600] * 4, CFG)  # decode ceiling 600
    relaxed = ControllerConfig(policy="dyn-both", decode_dynamic_ceiling=750)
    assert not power_limits_reached(PREFILL_TO_DECODE, [600] * 4, [600] * 4, relaxed)


def test_uniform_cap():
    assert uniform_cap(4800, 8, CFG) == 600
    assert uniform_cap(8000, 8, CFG) == 750
    assert uniform_cap(2000, 8, CFG) == 400


def test_select_gpu_donor():
    ws = (WorkerView(0, "prefill", 600),
          WorkerView(1, "decode", 600, active_sequences=3),
          WorkerView(2, "decode", 600, active_sequences=0),
          WorkerView(3, "decode", 600, active_sequences=5))
    assert select_gpu_donor(DECODE_TO_PREFILL, ws) == 2
    assert select_gpu_donor(PREFILL_TO_DECODE, pool(1, 600, 7, 600)) is None


def test_escalation_when_limits_reached():
    c = Controller(CFG)
    a = c.tick(snap(pool(4, 750, 4, 450, queued=3)), 1.4, 0.018, 5.0)
    assert a.kind == "move-gpu" and a.new_role == "prefill" and a.limits_reached
    assert set(a.cap_targets.values()) == {600} and len(a.cap_targets) == 8


def test_dyn_power_saturates_instead_of_escalating():
    c = Controller(ControllerConfig(policy="dyn-power"))
    a = c.tick(snap(pool(4, 750, 4, 450, queued=3)), 1.4, 0.018, 5.0)
    assert a.kind == "none" and a.saturated
    # Logged once per streak.
    assert not c.tick(snap(pool(4, 750, 4, 450, queued=3)), 1.4, 0.018, 5.25).saturated


def test_dyn_gpu_skips_power_axis():
    c = Controller(ControllerConfig(policy="dyn-gpu"))
    a = c.tick(snap(pool(4, 600, 4, 600, queued=3)), 1.4, 0.018, 5.0)
    assert a.kind == "move-gpu"


def test_rolling_metrics():
    samples = [(1.0, 0.2 * k) for k in range(1, 11)]
    ttft, tpot = rolling_metrics(samples, [(1.0, 0.02)], now=2.0, window=5.0)
    assert ttft == pytest.approx(1.8) and tpot == 0.02
    assert rolling_metrics([], [], 10.0, 5.0) == (0.0, 0.0)
    assert rolling_metrics([(9.0, 0.7)], [(9.0, 0.01)], 10.0, 5.0, "mean") == (0.7, 0.01)
    # Samples older than the window are ignored.
    assert rolling_metrics([(1.0, 9.9)], [], 10.0, 5.0) == (0.0, 0.0)


caps = st.integers(400, 750)


@given(st.integers(1, 7), caps, caps, st.sampled_from([DECODE_TO_PREFILL, PREFILL_TO_DECODE]))
def test_move_power_never_adds_watts(n_prefill, pcap, dcap, direction):
    dcap = min(dcap, 600)
    ws = pool(n_prefill, pcap, 8 - n_prefill, dcap)
    plan = move_power(direction, ws, CFG)
    if plan is None:
        p = [w.cap for w in ws if w.role == "prefill"]
        d = [w.cap for w in ws if w.role == "decode"]
        assert power_limits_reached(direction, p, d, CFG)
        return
    before = sum(w.cap for w in ws)
    after = sum(plan.targets.get(w.id, w.cap) for w in ws)
    assert after <= before
    for w in ws:
        t = plan.targets.get(w.id, w.cap)
        assert 400 <= t <= 750
        if w.role == "decode":
            assert t <= max(600, w.cap)
    # Pool-uniform caps stay pool-uniform.
    assert len({plan.targets[w.id] for w in ws if w.role == "prefill"}) == 1
    assert len({plan.targets[w.id] for w in ws if w.role == "decode"}) == 1
