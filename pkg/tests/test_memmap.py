import pytest
from hypothesis import given, strategies as st

from ianus.config import default_hardware, get_model
from ianus.memmap import (AddressMapper, PhysAddr, kv_segments, kv_span, map_address, plan_allocation,
                          tile_coords, tile_weight_matrix)

HW = default_hardware()


@given(rows=st.integers(1, 2000), cols=st.integers(1, 4000))
def test_tiles_cover_all_bank_pairs_at_one_row(rows, cols):
    tm = tile_weight_matrix(rows, cols, HW)
    for t in tm.iter_tiles():
        coords = {tile_coords(tm, r) for r in range(tm.rows_per_tile)}
        assert len(coords) == tm.rows_per_tile == 128
        rows_seen = {map_address(tm, t.index, r, 0).row for r in range(t.n_rows)}
        assert rows_seen == {t.dram_row}


@given(st.integers(0, 1 << 31))
def test_address_mapping_round_trips(addr):
    m = AddressMapper(HW, tuple(range(8)))
    pa = m.decode(addr)
    assert m.encode(pa) == addr
    assert 0 <= pa.column < HW.row_size // HW.column_bytes


def test_consecutive_rows_walk_banks_then_channels():
    m = AddressMapper(HW, tuple(range(8)))
    first = [m.decode(i * HW.row_size) for i in range(16 * 8 + 1)]
    assert [p.bank for p in first[:16]] == list(range(16))
    assert first[16].channel == 1 and first[16].bank == 0
    assert first[128] == PhysAddr(row=1, channel=0, bank=0, column=0, byte_offset=0)


@given(start=st.integers(0, 1 << 24), nbytes=st.integers(0, 1 << 20))
def test_spread_conserves_bytes(start, nbytes):
    m = AddressMapper(HW, (0, 2, 4, 6))
    by, acts = m.spread(start, nbytes)
    assert sum(by.values()) == nbytes
    if nbytes:
        units = -(-(start + nbytes) // HW.row_size) - start // HW.row_size
        assert sum(acts.values()) == units


@pytest.mark.parametrize("mode", ["unified", "partitioned", "plain"])
def test_gpt2m_allocation_fits_and_never_overlaps(mode):
    m = get_model("gpt2-m", 256, 512)
    hw = default_hardware(mode)
    plan = plan_allocation(m, hw)
    assert plan.footprint <= hw.total_capacity
    used: dict[tuple[int, int], str] = {}
    for tm in plan.tiles():
        for t in tm.iter_tiles():
            for ch in tm.channels:
                key = (ch, t.dram_row)
                assert key not in used, f"{tm.matrix_id} overlaps {used.get(key)}"
                used[key] = tm.matrix_id
    lin = sorted((p.plain_start, p.plain_start + p.nbytes) for p in plan.placements.values()
                 if p.plain_start is not None)
    for (a0, a1), (b0, _) in zip(lin, lin[1:]):
        assert a1 <= b0


def test_unified_keeps_single_copy_partitioned_duplicates():
    m = get_model("gpt2-m", 256, 512)
    uni = plan_allocation(m, default_hardware("unified"))
    part = plan_allocation(m, default_hardware("partitioned"))
    assert not any(p.duplicated for p in uni.placements.values())
    assert any(p.duplicated for p in part.placements.values())


def test_oversized_model_is_rejected_when_capacity_is_checked():
    from ianus.memmap import AllocationError
    with pytest.raises(AllocationError):
        plan_allocation(get_model("gpt-30b", 64, 8), default_hardware("unified"))


@given(block=st.integers(0, 23), head=st.integers(0, 15), which=st.integers(0, 1),
       p0=st.integers(0, 1000), n=st.integers(1, 24))
def test_kv_segments_stay_inside_the_cache(block, head, which, p0, n):
    m = get_model("gpt2-m", 256, 512)
    plan = plan_allocation(m, HW)
    p1 = min(p0 + n, m.max_positions)
    segs = kv_segments(plan, m, HW, block, head, which, p0, p1)
    base = plan["kv_cache"].plain_start
    assert sum(s for _, s in segs) == (p1 - p0) * m.head_dim * 2
    for a, s in segs:
        assert base <= a and a + s <= base + kv_span(m, HW)
        assert a // HW.row_size == (a + s - 1) // HW.row_size  # never straddles a DRAM row


def test_kv_rows_of_different_heads_are_disjoint():
    m = get_model("gpt2-m", 256, 512)
    plan = plan_allocation(m, HW)
    seen = set()
    for head in range(m.num_heads):
        for which in (0, 1):
            rows = {a // HW.row_size for a, _ in kv_segments(plan, m, HW, 0, head, which, 0, 64)}
            assert not rows & seen
            seen |= rows
