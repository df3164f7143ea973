from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdsim import Calibration, CalibrationError, DomainError, PerfModel, PowerCurve, RangeError, load_calibration
from pdsim.perf_model import LatencyModelParams

PERF = PerfModel()


def test_speedup_anchor_values():
    assert PERF.speedup("prefill", 400) == 1.0
    assert PERF.speedup("prefill", 750) == pytest.approx(1.8)
    assert PERF.speedup("decode", 600) == pytest.approx(1.4)


def test_speedup_two_anchor_interpolation():
    # Straight line from (400, 1.0) to (750, 1.8): 575 W sits halfway.
    cal = Calibration(prefill=PowerCurve(((400, 1.0), (750, 1.8))))
    assert PerfModel(cal).speedup("prefill", 575) == pytest.approx(1.4)


def test_speedup_default_curve_between_anchors():
    # With the (700, 1.72) knee the default curve is 1.0 + 0.72 * 175/300 at 575 W.
    assert PERF.speedup("prefill", 575) == pytest.approx(1.0 + 0.72 * 175 / 300)


@pytest.mark.parametrize("power", [399, 751, -1])
def test_speedup_out_of_range(power):
    with pytest.raises(RangeError):
        PERF.speedup("prefill", power)


def test_speedup_unknown_phase():
    with pytest.raises(DomainError):
        PERF.speedup("embed", 600)


def test_prefill_latency_examples():
    assert PERF.prefill_latency(8192, 1, 750) == pytest.approx(8192 / (13000 * 1.8))
    assert PERF.prefill_latency(8192, 1, 750) == pytest.approx(0.350, abs=5e-4)
    assert PERF.prefill_latency(8192, 1, 400) == pytest.approx(8192 / 13000)
    assert PERF.prefill_latency(8192, 1, 400) == pytest.approx(0.630, abs=5e-4)
    tiny = PERF.prefill_latency(1, 1, 750)
    assert 0 < tiny < 1e-3


def test_prefill_batch_efficiency():
    # Batch of 4 runs at 1 + 0.15 * 3 = 1.45x the single-request token rate.
    assert PERF.prefill_latency(16384, 4, 400) == pytest.approx(16384 / (13000 * 1.45))


@pytest.mark.parametrize("tokens,batch", [(0, 1), (10, 0)])
def test_prefill_latency_rejects_bad_input(tokens, batch):
    with pytest.raises(DomainError):
        PERF.prefill_latency(tokens, batch, 600)


def test_decode_step_examples():
    assert PERF.decode_step_latency(32, 600) == pytest.approx((0.008 + 0.00025 * 32) / 1.4)
    assert PERF.decode_step_latency(32, 600) == pytest.approx(0.0114, abs=5e-5)
    assert PERF.decode_step_latency(1, 400) == pytest.approx(0.00825)
    ratio = PERF.decode_step_latency(32, 750) / PERF.decode_step_latency(32, 600)
    assert ratio == pytest.approx(PERF.speedup("decode", 600) / PERF.speedup("decode", 750))
    with pytest.raises(DomainError):
        PERF.decode_step_latency(0, 600)


def test_kv_transfer_examples():
    kv_bytes = 32 * 8 * 128 * 2 * 2
    assert kv_bytes == LatencyModelParams().kv_bytes_per_token
    assert PERF.kv_transfer_latency(8192) == pytest.approx(0.0005 + 8192 * kv_bytes / 48e9)
    assert PERF.kv_transfer_latency(8192) == pytest.approx(0.0229, abs=5e-5)
    with pytest.raises(DomainError):
        PERF.kv_transfer_latency(0)


def test_doubling_bandwidth_halves_variable_term():
    fast = PerfModel(Calibration(params=LatencyModelParams(fabric_bandwidth=96e9)))
    var_slow = PERF.kv_transfer_latency(4096) - 0.0005
    var_fast = fast.kv_transfer_latency(4096) - 0.0005
    assert var_fast == pytest.approx(var_slow / 2)


def test_load_calibration_empty_file(tmp_path):
    path = tmp_path / "cal.json"
    path.write_text("")
    assert load_calibration(path) == Calibration()
    assert load_calibration(None) == Calibration()


def test_load_calibration_accepts_decode_anchors(tmp_path):
    path = tmp_path / "cal.json"
    path.write_text(json.dumps({"decode_anchors": [[400, 1.0], [600, 1.4], [750, 1.45]]}))
    cal = load_calibration(path)
    assert cal.decode.anchors == ((400, 1.0), (600, 1.4), (750, 1.45))


@pytest.mark.parametrize("data", [
    {"prefill_anchors": [[400, 1.0], [500, 0.9]]},  # speedup decreases
    {"prefill_anchors": [[400, 1.0], [400, 1.2]]},  # powers not strictly increasing
    {"decode_anchors": [[400, 1.1], [600, 1.4]]},  # not normalized
    {"decode_anchors": [[400, 1.0], [800, 1.4]]},  # outside the power range
    {"latency_params": {"fabric_bandwidth": 0}},
    {"min_power": 750, "max_power": 400},
    {"bogus": 1},
])
def test_load_calibration_rejects(tmp_path, data):
    path = tmp_path / "cal.json"
    path.write_text(json.dumps(data))
    with pytest.raises(CalibrationError):
        load_calibration(path)


def test_calibration_round_trip():
    cal = Calibration()
    assert Calibration.from_dict(json.loads(json.dumps(cal.to_dict()))) == cal


@given(st.integers(400, 750), st.integers(400, 750), st.sampled_from(["prefill", "decode"]))
def test_speedup_monotone_and_bounded(a, b, phase):
    lo, hi = sorted((a, b))
    s_lo, s_hi = PERF.speedup(phase, lo), PERF.speedup(phase, hi)
    assert 1.0 <= s_lo <= s_hi <= PERF.speedup(phase, 750)


@given(st.integers(1, 65536), st.integers(1, 8), st.integers(400, 749))
def test_more_power_never_slows_prefill(tokens, batch, power):
    assert PERF.prefill_latency(tokens, batch, power + 1) <= PERF.prefill_latency(tokens, batch, power)
