import json
import math

import pytest
from hypothesis import given, strategies as st

from itasim.config import AcceleratorConfig, AttentionDims
from itasim.perf import (
    PHASES,
    bandwidth_output_stationary,
    bandwidth_weight_stationary,
    build_schedule,
    dataflow_comparison,
    interface_bytes_per_cycle,
    peak_tops,
    simulate_perf,
    weight_buffer_size,
)

CFG = AcceleratorConfig()
SQUARE = AttentionDims(64, 64, 64, 1)
small = st.integers(1, 256)


def report(dims=SQUARE, cfg=CFG, mode="overlap"):
    return simulate_perf(build_schedule(dims, cfg, mode))


class TestBandwidthFormulas:
    def test_weight_stationary_default(self):
        assert bandwidth_weight_stationary(CFG) == 1664

    def test_weight_stationary_minimal(self):
        assert bandwidth_weight_stationary(N=1, M=1, D=0) == 32

    def test_output_stationary_default(self):
        assert bandwidth_output_stationary(CFG) == 9344

    def test_ratio(self):
        assert bandwidth_output_stationary(CFG) / bandwidth_weight_stationary(CFG) == pytest.approx(5.615, abs=1e-3)

    def test_weight_buffer(self):
        assert weight_buffer_size(CFG) == 2048
        assert weight_buffer_size(N=1, M=1) == 2

    def test_needs_parameters(self):
        with pytest.raises(TypeError):
            bandwidth_weight_stationary()

    @given(small, small, st.integers(0, 64))
    def test_linear_in_each_parameter(self, n, m, d):
        ws = lambda **k: bandwidth_weight_stationary(**{"N": n, "M": m, "D": d, **k})  # noqa: E731
        assert ws(M=m + 1) - ws() == 8
        assert ws(N=n + 1) - ws() == 24 + 2 * d
        assert ws(D=d + 1) - ws() == 2 * n

    @given(small, small, st.integers(0, 64))
    def test_output_stationary_never_cheaper(self, n, m, d):
        assert bandwidth_output_stationary(N=n, M=m, D=d) >= bandwidth_weight_stationary(N=n, M=m, D=d)

    def test_interface_sum_matches_formula(self):
        per = interface_bytes_per_cycle(CFG)
        assert 8 * sum(per.values()) == bandwidth_weight_stationary(CFG)

    def test_dataflow_table(self):
        rows = dataflow_comparison()
        assert [r["N"] for r in rows] == [4, 8, 16, 32]
        assert all(r["os_bits"] > r["ws_bits"] for r in rows)
        assert [r["ws_bits"] for r in rows if r["N"] == 16] == [1664]


class TestSchedule:
    def test_square_single_head_enumeration(self):
        ops = build_schedule(SQUARE).ops
        assert [(o.step, o.softmax) for o in ops] == [
            ("q", ""), ("k", ""), ("v", ""), ("qk", "DA"), ("di", "DI"), ("av", "EN"), ("out", ""),
        ]
        assert all(o.cycles == 256 for o in ops if o.step != "di")
        assert not any(o.padded for o in ops)

    def test_da_only_on_last_slice(self):
        ops = build_schedule(AttentionDims(64, 64, 130, 1)).ops
        qk = [o for o in ops if o.step == "qk"]
        assert [o.softmax for o in qk] == ["", "", "DA"]

    def test_padded_edges(self):
        ops = build_schedule(AttentionDims(65, 64, 64, 1)).ops
        q = [o for o in ops if o.step == "q"]
        assert [o.padded for o in q] == [False, True]
        assert q[1].useful_macs == 1 * 64 * 64

    def test_each_tile_slice_exactly_once(self):
        dims = AttentionDims(130, 100, 70, 2)
        sched = build_schedule(dims)
        for (step, _, _, _), slices in sched.coverage().items():
            inner = {"q": 100, "k": 100, "v": 100, "qk": 70, "av": 130, "out": 140}[step]
            assert sorted(slices) == list(range(math.ceil(inner / 64)))
        useful = sum(o.useful_macs for o in sched.ops)
        S, E, P, H = 130, 100, 70, 2
        assert useful == H * (3 * S * E * P + 2 * S * S * P) + S * H * P * E

    def test_one_di_per_block(self):
        ops = build_schedule(AttentionDims(130, 64, 64, 3)).ops
        di = [(o.head, o.row_tile, o.rows) for o in ops if o.step == "di"]
        assert di == [(h, b, r) for h in range(3) for b, r in enumerate((64, 64, 2))]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            build_schedule(SQUARE, softmax_mode="fast")

    @pytest.mark.parametrize("text", ["0x64x64x1", "64x-1x64", "64x64"])
    def test_bad_dims(self, text):
        with pytest.raises(ValueError):
            AttentionDims.parse(text)


class TestSimulation:
    def test_square_defaults(self):
        r = report()
        assert r.total_cycles == 6 * 256
        assert r.cycles_per_phase == {"projections": 768, "qk": 256, "av": 256, "output_projection": 256}
        assert r.mac_utilization == 1.0
        assert r.throughput_tops == pytest.approx(1.024)
        assert r.peak_tops == pytest.approx(peak_tops(CFG)) == pytest.approx(1.024)
        assert r.softmax_stall_cycles == 0 and r.diagnostics == []

    def test_divider_fits_overlap_window(self):
        block = report().divider["blocks"][0]
        assert block["demand_cycles"] == 32 * 16 == 512
        assert block["window_cycles"] == 512
        assert block["stall_cycles"] == 0

    def test_divider_violation_reported(self):
        r = report(cfg=AcceleratorConfig(divider_latency_cycles=40))
        assert r.softmax_stall_cycles == 32 * 40 - 512
        assert any("divider" in d for d in r.diagnostics)

    def test_serial_mode_costs_more(self):
        assert report(mode="serial").total_cycles == 1536 + 512
        assert report(mode="free").total_cycles == 1536

    def test_fifo_stall(self):
        r = report(cfg=AcceleratorConfig(fifo_depth=0, output_drain_bytes_per_cycle=8))
        assert r.fifo_stall_cycles == 1536
        assert any("FIFO" in d for d in r.diagnostics)
        assert report(cfg=AcceleratorConfig(fifo_depth=64)).fifo_stall_cycles == 0

    def test_traffic_consistent_with_cycles(self):
        r = report(AttentionDims(100, 80, 48, 2))
        per = interface_bytes_per_cycle(CFG)
        compute = sum(r.cycles_per_phase.values())
        for key, rate in per.items():
            assert r.traffic_total[key] == pytest.approx(rate * compute)
            assert r.traffic_total[key] == pytest.approx(sum(r.traffic[p][key] for p in PHASES))

    def test_padding_lowers_utilization(self):
        assert report(AttentionDims(65, 64, 64, 1)).mac_utilization < 0.6

    @given(st.floats(1e6, 2e9))
    def test_throughput_linear_in_frequency(self, f):
        r = report(cfg=AcceleratorConfig(freq_hz=f))
        assert r.throughput_tops == pytest.approx(1.024 * f / 500e6)

    def test_utilization_bounded(self):
        for dims in (AttentionDims(1, 1, 1, 1), AttentionDims(200, 33, 17, 5)):
            assert 0 < report(dims).mac_utilization <= 1

    def test_json_round_trip(self):
        data = json.loads(report().to_json())
        assert data["schema_version"] == 1
        assert data["total_cycles"] == 1536

    def test_zero_sequence_rejected(self):
        with pytest.raises(ValueError):
            AttentionDims(0, 64, 64, 1)
