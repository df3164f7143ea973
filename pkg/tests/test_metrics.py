from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdsim import DomainError
from pdsim.metrics import (
    CurvePoint,
    attainment_and_goodput,
    attainment_curve,
    make_record,
    max_qps_at_attainment,
    percentile,
    qps_per_watt,
    records_to_csv,
    score_request,
    summarize,
    time_weighted_mean,
)

SLO = (1.0, 0.040)


def rec(rid, arrival, ttft, tpot, out=10, done=None):
    """Record with given TTFT/TPOT; exec time fixed at 0.1 s when possible."""
    a = round(arrival * 1e6)
    exec_us = min(100_000, round(ttft * 1e6))
    start = a + round(ttft * 1e6) - exec_us
    end = a + round(ttft * 1e6)
    completion = end + round(tpot * 1e6) * (out - 1) if done is None else round(done * 1e6)
    return make_record(rid, 100, out, a, start, end, completion, SLO)


def test_score_request():
    assert score_request(0.9, 0.038, SLO) == (True, True)
    assert score_request(1.0, 0.040, SLO) == (True, True)
    assert score_request(1.0000001, 0.040, SLO) == (False, True)
    assert score_request(0.5, 0.0, SLO) == (True, True)


def test_single_output_token_has_zero_tpot():
    r = make_record(0, 10, 1, 0, 0, 500_000, 510_000, SLO)
    assert r.tpot == 0.0 and r.met_tpot


def test_ttft_decomposition_exact():
    r = make_record(0, 10, 5, 1_234_567, 2_000_001, 2_500_003, 3_000_000, SLO)
    assert r.ttft == r.queuing_delay + r.exec_time
    assert r.tpot == pytest.approx((3_000_000 - 2_500_003) / 1e6 / 4)


def test_attainment_hand_count():
    records = [rec(0, 0.0, 0.5, 0.01), rec(1, 1.0, 0.5, 0.01), rec(2, 2.0, 2.0, 0.01)]
    attain, goodput = attainment_and_goodput(records, 10.0)
    assert attain == pytest.approx(2 / 3)
    assert goodput == pytest.approx(0.2)


def test_attainment_empty_and_all_met():
    assert attainment_and_goodput([]) == (0.0, 0.0)
    records = [rec(i, i * 0.1, 0.2, 0.01) for i in range(5)]
    assert attainment_and_goodput(records)[0] == 1.0


def test_qps_per_watt():
    assert qps_per_watt(12, 4800) == pytest.approx(0.0025)
    assert qps_per_watt(12, 4800, 0.6) == pytest.approx(12 / 8000)
    with pytest.raises(DomainError):
        qps_per_watt(1, 0)


def test_time_weighted_mean_half_and_half():
    steps = [(0.0, 4800.0), (5.0, 2400.0)]
    assert time_weighted_mean(steps, 0.0, 10.0) == pytest.approx(3600.0)
    assert time_weighted_mean([(0.0, 4800.0)], 0.0, 10.0) == 4800.0


def test_percentile_nearest_rank():
    assert percentile(range(1, 11), 90) == 9
    assert percentile([0.2 * k for k in range(1, 11)], 90) == pytest.approx(1.8)
    assert percentile([3.5], 1) == 3.5
    assert percentile([3.5], 99) == 3.5
    assert percentile([5, 1, 3], 50) == 3
    with pytest.raises(DomainError):
        percentile([], 90)


def test_attainment_curve_and_threshold():
    pts = [CurvePoint(1.5, 0.7), CurvePoint(1.25, 0.95), CurvePoint(1.375, 0.85)]
    curve = attainment_curve(pts)
    assert [p.qps_per_gpu for p in curve] == [1.25, 1.375, 1.5]
    assert max_qps_at_attainment(curve, 0.8) == 1.375
    assert attainment_curve([]) == []
    assert max_qps_at_attainment([], 0.8) is None


def test_summarize_and_csv():
    records = [rec(0, 0.0, 0.5, 0.01), rec(1, 1.0, 2.0, 0.01)]
    s = summarize(records, [(0.0, 4800.0)])
    assert s.num_requests == 2 and s.attained == 1 and s.attainment == 0.5
    assert s.node_power_estimate == pytest.approx(8000.0)
    assert s.goodput <= s.throughput
    lines = records_to_csv(records).splitlines()
    assert lines[0] == "id,arrival_s,input_tokens,output_tokens,queuing_delay_s,exec_s,ttft_s,tpot_s,met_ttft,met_tpot"
    assert len(lines) == 3


@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 3), st.floats(0, 0.1), st.integers(1, 50)),
                min_size=1, max_size=40))
def test_attainment_bounds(rows):
    records = [rec(i, a, t, p, out=o) for i, (a, t, p, o) in enumerate(rows)]
    attain, goodput = attainment_and_goodput(records)
    assert 0.0 <= attain <= 1.0
    s = summarize(records, [(0.0, 4800.0)])
    assert s.goodput <= s.throughput + 1e-12
    for r in records:
        assert r.ttft == r.queuing_delay + r.exec_time
        assert r.met_ttft == (r.ttft <= SLO[0]) and r.met_tpot == (r.tpot <= SLO[1])


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=100), st.floats(0, 100))
def test_percentile_is_a_sample_with_rank_property(values, p):
    v = percentile(values, p)
    assert v in values
    # At least p% of samples are <= the nearest-rank percentile.
    assert sum(1 for x in values if x <= v) >= p / 100 * len(values) - 1e-9
