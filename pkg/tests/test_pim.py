import pytest
from hypothesis import given, settings, strategies as st

from ianus.config import default_hardware
from ianus.isa import Command, Kind, MemCommand, MemKind, expand_macro
from ianus.memmap import tile_weight_matrix
from ianus.npu import macro_cycles
from ianus.pim import (ChannelState, TimingViolation, TraceRecord, dump_trace, parse_trace,
                       run_micro_sequence, stream_cycles, validate_trace)
from oracle import oracle_cycles

HW = default_hardware()


def _seq(rows, cols, op="fc", n=1, channels=None):
    tm = tile_weight_matrix(rows, cols, HW, channels=channels)
    return tm, expand_macro(Command(0, Kind.PIM_MACRO, op), tm, HW, n)


@settings(max_examples=25)
@given(rows=st.integers(1, 160), cols=st.integers(1, 1100), n=st.integers(1, 2),
       op=st.sampled_from(["fc", "fc_gelu"]))
def test_controller_matches_stepping_oracle(rows, cols, n, op):
    tm, seq = _seq(rows, cols, op, n, channels=(0,))
    assert macro_cycles(tm, op, n, HW)[0] == oracle_cycles(seq, HW)


@given(rows=st.integers(1, 300), cols=st.integers(1, 2200))
def test_macro_trace_is_legal(rows, cols):
    tm, seq = _seq(rows, cols, "fc_gelu", 2)
    chans = {c: ChannelState(HW, c, record=True) for c in tm.channels}
    run_micro_sequence(chans, seq, tm.channels, 0)
    recs = [r for c in chans.values() for r in c.trace]
    assert validate_trace(recs, HW) == []


@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 50), st.integers(1, 64)), min_size=1, max_size=12),
       st.booleans())
def test_normal_streams_are_legal(units, write):
    ch = ChannelState(HW, 0, record=True)
    end = ch.stream(units, write, 0)
    assert validate_trace(ch.trace, HW) == []
    assert end >= max(r.cycle for r in ch.trace)


def test_stream_cycles_closed_form():
    assert stream_cycles(HW, 64) > stream_cycles(HW, 1)


def test_mac_on_closed_row_raises():
    ch = ChannelState(HW, 0)
    from ianus.pim import pu_mac
    with pytest.raises(TimingViolation):
        pu_mac(ch, 5, 0)


def test_read_after_activate_waits_trcd():
    ch = ChannelState(HW, 0)
    a = ch.issue(MemCommand(MemKind.ACT, 0, 3, 7))
    r = ch.issue(MemCommand(MemKind.RD, 0, 3, 7, 0))
    assert r - a == HW.timing.cycles("tRCDRD")


@pytest.mark.parametrize("rule,records", [
    ("tRCDRD", [(0, 0, "ACT", 1), (10, 0, "RD", 1)]),
    ("tRAS", [(0, 0, "ACT", 1), (80, 0, "RD", 1), (20, 0, "PRE", 1)]),
    ("tRP", [(0, 0, "ACT", 1), (100, 0, "PRE", 1), (110, 0, "ACT", 2)]),
    ("tWR", [(0, 0, "ACT", 1), (60, 0, "WR", 1), (70, 0, "PRE", 1)]),
    ("tCK", [(0, 0, "ACT", 1), (0, 1, "ACT", 1)]),
    ("tCCD_S", [(0, 0, "ACT", 1), (0 + 1, 1, "ACT", 1), (100, 0, "RD", 1), (101, 1, "RD", 1)]),
])
def test_validator_flags_each_rule(rule, records):
    recs = [TraceRecord(c, 0, b, k, r) for c, b, k, r in records]
    found = validate_trace(recs, HW)
    assert any(v.rule.startswith(rule) for v in found), found


def test_trace_text_round_trips():
    recs = [TraceRecord(3, 1, None, "ACT_ALL_BANKS", 9), TraceRecord(80, 1, 4, "RD", 9, 2)]
    assert parse_trace(dump_trace(recs)) == recs
    with pytest.raises(ValueError):
        parse_trace("1 2 3\n")
