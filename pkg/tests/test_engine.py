import pytest

from ianus.compiler import CompileOptions, Stage, build_commands
from ianus.config import default_hardware
from ianus.engine import (RunOptions, account_energy, critical_path, dma_pim_overlap, run, run_multi_device,
                          simulate_stage, sync_cost, timeline_csv)
from ianus.isa import Command, Kind
from ianus.pim import validate_trace
from conftest import tiny_model

CASES = [("unified", "gen_mu_qkt"), ("unified", "gen_pim_qkt"), ("partitioned", "gen_mu_qkt"),
         ("partitioned", "gen_pim_qkt"), ("plain", "gen_mu_qkt")]


def _stage(m, kind):
    return Stage.summarization(m) if kind == "summarization" else Stage.generation(m, 2)


@pytest.mark.parametrize("kind", ["summarization", "generation"])
@pytest.mark.parametrize("mode,attention", CASES)
def test_cycle_level_trace_is_legal(mode, attention, kind):
    m, hw = tiny_model(), default_hardware(mode)
    sp = build_commands(m, hw, _stage(m, kind), CompileOptions(attention=attention))
    r = simulate_stage(sp, hw, trace=True)
    assert r.trace
    assert validate_trace(r.trace, hw) == []
    assert len(r.records) == len(sp.commands)


@pytest.mark.parametrize("trace", [False, True])
@pytest.mark.parametrize("attention", ["gen_mu_qkt", "gen_pim_qkt"])
def test_unified_never_overlaps_dma_with_pim(attention, trace):
    m, hw = tiny_model(), default_hardware("unified")
    for kind in ("summarization", "generation"):
        sp = build_commands(m, hw, _stage(m, kind), CompileOptions(attention=attention))
        r = simulate_stage(sp, hw, trace=trace)
        assert any(i.kind == "pim" for i in r.intervals)
        assert dma_pim_overlap(r.intervals) == 0.0


def test_partitioned_lets_dma_run_beside_pim():
    m, hw = tiny_model(), default_hardware("partitioned")
    sp = build_commands(m, hw, _stage(m, "generation"))
    r = simulate_stage(sp, hw)
    assert dma_pim_overlap(r.intervals) > 0
    assert dma_pim_overlap(r.intervals, same_channel=True) == 0


def test_units_never_double_book():
    m, hw = tiny_model(), default_hardware()
    sp = build_commands(m, hw, _stage(m, "generation"))
    r = simulate_stage(sp, hw)
    by_unit: dict = {}
    for rec in r.records.values():
        c = rec.cmd
        if c.core >= 0 and c.kind is not Kind.SYNC and rec.end > rec.start:
            by_unit.setdefault((c.core, c.unit), []).append((rec.start, rec.end))
    for spans in by_unit.values():
        spans.sort()
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            assert b0 >= a1 - 1e-9
    for rec in r.records.values():
        for d in rec.cmd.deps:
            if d in r.records:
                assert rec.start >= r.records[d].end - 1e-9


def test_breakdown_partitions_stage_time():
    m, hw = tiny_model(), default_hardware()
    r = simulate_stage(build_commands(m, hw, _stage(m, "summarization")), hw)
    assert sum(r.breakdown.values()) == pytest.approx(r.elapsed)
    assert sum(critical_path(r.records, r.start).values()) == pytest.approx(r.elapsed)


def test_runs_are_deterministic():
    m, hw = tiny_model(), default_hardware()
    a, b = run(m, hw), run(m, hw)
    assert a.to_json() == b.to_json()


def test_sampled_generation_tracks_exact_stepping():
    m = tiny_model(16, 12)
    hw = default_hardware()
    exact = run(m, hw, RunOptions(exact=True))
    approx = run(m, hw, RunOptions(gen_samples=4))
    assert approx.total_ns == pytest.approx(exact.total_ns, rel=0.01)


def test_energy_accounting():
    hw = default_hardware()
    e = account_energy({"pim_macs": 10, "dram_reads": 10}, hw)
    assert e.pim_ops == pytest.approx(3 * e.normal_mem)
    assert hw.energy.e_pim_op == 3 * hw.energy.e_dram_read
    with pytest.raises(ValueError):
        account_energy({"photons": 1}, hw)
    rep = run(tiny_model(), hw)
    assert all(v >= 0 for v in rep.energy.values())
    assert rep.energy["total"] == pytest.approx(sum(v for k, v in rep.energy.items() if k != "total"))


def test_plain_mode_spends_no_pim_energy():
    rep = run(tiny_model(), default_hardware("plain"))
    assert rep.energy["pim_ops"] == 0
    assert rep.counters["pim_macros"] == 0


def test_sync_cost_adds_pcie_for_more_devices():
    hw = default_hardware()
    c = Command(0, Kind.SYNC, sync_bytes=4096)
    t1, l1 = sync_cost(c, hw, 1)
    t4, l4 = sync_cost(c, hw, 4)
    assert l1 == 0 and l4 > 0
    assert t4 - t1 >= 3 * 2 * hw.pcie_latency_ns


def test_multi_device_scales_energy_by_devices():
    m = tiny_model(heads=8)
    hw = default_hardware()
    one = run(m, hw)
    two = run_multi_device(m, hw, 2)
    assert two.n_devices == 2
    assert two.counters["link_bytes"] > 0
    # each device does half the work, so summed energy stays near one device's
    assert two.energy["core_compute"] == pytest.approx(one.energy["core_compute"], rel=0.1)
    with pytest.raises(ValueError):
        run_multi_device(m, hw, 0)


def test_timeline_csv_has_a_row_per_command():
    m, hw = tiny_model(), default_hardware()
    sp = build_commands(m, hw, _stage(m, "generation"))
    r = simulate_stage(sp, hw)
    assert timeline_csv(r).count("\n") == len(sp.commands) + 1


def test_report_formats():
    rep = run(tiny_model(), default_hardware())
    assert "per generated token" in rep.to_text()
    assert rep.to_csv().startswith("stage,class,ns")
    assert rep.attention["generation"] == "gen_mu_qkt"
