import random

from hypothesis import given, strategies as st

from ianus.config import default_hardware
from ianus.isa import Command, Kind, MicroKind, count_kinds, expand_macro, gb_segments, topo_validate
from ianus.memmap import tile_weight_matrix

HW = default_hardware()


def _macro(op="fc"):
    return Command(0, Kind.PIM_MACRO, op)


@given(rows=st.integers(1, 600), cols=st.integers(1, 3000), n=st.integers(1, 3),
       op=st.sampled_from(["fc", "fc_gelu"]))
def test_macro_decoding_counts(rows, cols, n, op):
    tm = tile_weight_matrix(rows, cols, HW)
    nr, nc = tm.grid
    k = count_kinds(expand_macro(_macro(op), tm, HW, n))
    assert k[MicroKind.ACT_ALL_BANKS] == k[MicroKind.PRECHARGE_ALL] == n * nr * nc
    assert k[MicroKind.READ_ACC] == n * nr  # accumulators drain once per tile row
    assert k[MicroKind.ACT_FUNC] == (n * nr if op == "fc_gelu" else 0)
    bursts = sum(-(-tm.tile(i).n_cols // HW.elems_per_column) for i in range(tm.num_tiles))
    assert k[MicroKind.MAC_ALL_BANKS] == n * bursts


def test_global_buffer_is_written_once_per_column_tile():
    tm = tile_weight_matrix(512, 1024, HW)  # 4 tile rows, one column tile
    k = count_kinds(expand_macro(_macro(), tm, HW, 1))
    assert k[MicroKind.WRITE_GB] == gb_segments(1024, HW)


def test_single_channel_macro_is_unicast():
    tm = tile_weight_matrix(16, 64, HW, channels=(3,))
    assert {m.channel for m in expand_macro(_macro(), tm, HW, 1)} == {3}


@st.composite
def dags(draw):
    n = draw(st.integers(1, 40))
    cmds = []
    for i in range(n):
        deps = draw(st.sets(st.integers(0, i - 1), max_size=4)) if i else set()
        cmds.append(Command(i, Kind.VU, "residual", deps=deps))
    return cmds


@given(dags(), st.randoms())
def test_forward_edges_are_acyclic_and_back_edges_are_found(cmds, rnd: random.Random):
    assert topo_validate(cmds) is None
    if len(cmds) >= 2:
        a, b = sorted(rnd.sample(range(len(cmds)), 2))
        cmds[b].deps.add(a)
        cmds[a].deps.add(b)
        cyc = topo_validate(cmds)
        assert cyc is not None and len(cyc) >= 2


def test_external_deps_are_ignored():
    assert topo_validate([Command(5, Kind.VU, deps={1, 2})]) is None
