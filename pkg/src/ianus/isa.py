"""Command hierarchy shared by the compiler, scheduler and memory controllers.

Three levels:

* :class:`Command` - coarse units of work the per-core command scheduler
  tracks (FCs on the matrix unit, vector kernels, DMAs, macro PIM ops, syncs).
* :class:`MicroPimCommand` - channel-level PIM primitives a macro decodes into.
* :class:`MemCommand` - ordinary DRAM commands (ACT/RD/WR/PRE).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Sequence

if TYPE_CHECKING:
    from .memmap import TileMap


class Kind(str, Enum):
    MU_FC = "MU_FC"
    MU_ATTN = "MU_ATTN"
    VU = "VU"
    DMA = "DMA"
    PIM_MACRO = "PIM_MACRO"
    SYNC = "SYNC"


# sub-kinds, stored in Command.op
MU_ATTN_OPS = ("qkt", "sv")
VU_OPS = ("layernorm", "residual", "softmax_masked", "gelu", "concat")
DMA_OPS = ("load", "store", "onchip_transpose", "prefetch")
PIM_OPS = ("fc", "fc_gelu")


@dataclass(frozen=True)
class OperandDesc:
    """Shapes and placement a command operates on.

    ``weight_rows`` is the output dimension and ``weight_cols`` the reduction
    dimension, matching the PIM layout where one matrix row is reduced inside
    one bank.
    """

    n_tokens: int = 0
    weight_rows: int = 0
    weight_cols: int = 0
    head_index: int | None = None
    elements: int = 0  # VU work size
    nbytes: int = 0  # DMA payload
    channels: tuple[int, ...] = ()  # off-chip channels touched (DMA) or used (PIM)
    bytes_per_channel: tuple[int, ...] = ()
    activations: int = 0  # DRAM rows opened by a DMA
    in_addr: int = 0
    out_addr: int = 0
    matrix: str = ""
    weight_bytes: int = 0  # operand weight region for MU FCs (loaded by a separate DMA)
    # ("linear", start, nbytes), ("segments", ((start, nbytes), ...)) or ("tiled", TileMap, r0, r1)
    region: tuple = ()


@dataclass
class Command:
    id: int
    kind: Kind
    op: str = ""
    core: int = -1  # -1 means broadcast / device level
    deps: set[int] = field(default_factory=set)
    operand: OperandDesc = field(default_factory=OperandDesc)
    op_class: str = ""
    block: int = -1
    tiles: "TileMap | None" = None
    name: str = ""
    sync_bytes: int = 0  # payload exchanged at a SYNC

    @property
    def unit(self) -> str:
        if self.kind in (Kind.MU_FC, Kind.MU_ATTN):
            return "mu"
        if self.kind is Kind.VU:
            return "vu"
        if self.kind is Kind.DMA:
            if self.op == "onchip_transpose":
                return "dma_xpose"
            return "dma_st" if self.op == "store" else "dma_ld"
        if self.kind is Kind.PIM_MACRO:
            return "pim"
        return "sync"

    @property
    def off_chip(self) -> bool:
        return self.kind is Kind.DMA and self.op != "onchip_transpose"

    def describe(self) -> str:
        o = self.operand
        deps = ",".join(str(d) for d in sorted(self.deps)) or "-"
        parts = [f"{self.id}", f"{self.kind.value}:{self.op}" if self.op else self.kind.value,
                 f"core={self.core}", f"deps={deps}", f"class={self.op_class}"]
        if o.n_tokens:
            parts.append(f"n={o.n_tokens}")
        if o.weight_rows:
            parts.append(f"w={o.weight_rows}x{o.weight_cols}")
        if o.elements:
            parts.append(f"elems={o.elements}")
        if o.nbytes:
            parts.append(f"bytes={o.nbytes}")
        if o.head_index is not None:
            parts.append(f"head={o.head_index}")
        if self.name:
            parts.append(f"name={self.name}")
        return " ".join(parts)


class MicroKind(str, Enum):
    WRITE_GB = "WRITE_GB"
    ACT_ALL_BANKS = "ACT_ALL_BANKS"
    MAC_ALL_BANKS = "MAC_ALL_BANKS"
    ACT_FUNC = "ACT_FUNC"
    READ_ACC = "READ_ACC"
    PRECHARGE_ALL = "PRECHARGE_ALL"


BROADCAST = -1


@dataclass(frozen=True)
class MicroPimCommand:
    kind: MicroKind
    channel: int  # BROADCAST for all channels of the macro
    row: int = 0
    column: int = 0
    tile: int = 0
    segment: int = 0  # global-buffer segment for WRITE_GB
    token: int = 0  # input vector the command belongs to
    col_tile: int = 0

    @property
    def gb_key(self) -> tuple[int, int]:
        return (self.token, self.col_tile)


class MemKind(str, Enum):
    ACT = "ACT"
    RD = "RD"
    WR = "WR"
    PRE = "PRE"


@dataclass(frozen=True)
class MemCommand:
    kind: MemKind
    channel: int
    bank: int
    row: int
    column: int = 0


# ---------------------------------------------------------------------------


def topo_validate(cmds: Sequence[Command]) -> list[int] | None:
    """Return ``None`` when the dependency graph is acyclic, else one cycle.

    Dependencies on ids outside ``cmds`` are ignored (they were satisfied by
    an earlier stage).
    """
    ids = {c.id for c in cmds}
    graph = {c.id: [d for d in c.deps if d in ids] for c in cmds}
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(graph, WHITE)
    for root in graph:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(graph[root]))]
        path = [root]
        color[root] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = BLACK
                stack.pop()
                path.pop()
            elif color[nxt] == GREY:
                return path[path.index(nxt):]
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                stack.append((nxt, iter(graph[nxt])))
                path.append(nxt)
    return None


def gb_segments(n_elems: int, hw) -> int:
    """WRITE_GB commands needed to stage ``n_elems`` input elements."""
    return math.ceil(n_elems / hw.elems_per_column)


def expand_macro(macro: Command, tiles: "TileMap", hw, n_tokens: int | None = None) -> list[MicroPimCommand]:
    """Decode a macro PIM command into its micro command sequence.

    Tiles are visited row-major. The global buffer is rewritten only when the
    needed input segment differs from what it holds, and the accumulators are
    drained (READ_ACC, preceded by ACT_FUNC for ``fc_gelu``) once per tile row,
    after its last column tile. The sequence is repeated per input token.
    """
    if tiles is None or tiles.num_tiles == 0:
        raise ValueError(f"macro {macro.id} has no tiles to execute")
    n = n_tokens if n_tokens is not None else max(1, macro.operand.n_tokens)
    chan = BROADCAST if len(tiles.channels) > 1 else tiles.channels[0]
    out: list[MicroPimCommand] = []
    epc = hw.elems_per_column
    gb_elems = hw.global_buffer_size // hw.dtype_bytes
    for token in range(n):
        held = None
        for t in tiles.iter_tiles():
            def micro(kind, column=0, segment=0):
                return MicroPimCommand(kind, chan, t.dram_row, column, t.index, segment, token, t.col_tile)

            if held != t.col_tile:
                for s in range(gb_segments(min(t.n_cols, gb_elems), hw)):
                    out.append(micro(MicroKind.WRITE_GB, segment=s))
                held = t.col_tile
            out.append(micro(MicroKind.ACT_ALL_BANKS))
            for col in range(math.ceil(t.n_cols / epc)):
                out.append(micro(MicroKind.MAC_ALL_BANKS, column=col))
            if t.last_in_row:
                if macro.op == "fc_gelu":
                    out.append(micro(MicroKind.ACT_FUNC))
                out.append(micro(MicroKind.READ_ACC))
            out.append(micro(MicroKind.PRECHARGE_ALL))
    return out


def count_kinds(seq: Iterable[MicroPimCommand]) -> dict[MicroKind, int]:
    counts = dict.fromkeys(MicroKind, 0)
    for m in seq:
        counts[m.kind] += 1
    return counts
