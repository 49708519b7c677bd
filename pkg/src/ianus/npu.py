"""NPU core timing: matrix unit, vector unit, on-chip transpose, PCU dispatch.

Also holds the per-core scheduler state (pending window and per-unit issue
queues) that the engine drives.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

from .config import HardwareConfig
from .isa import Command, Kind, expand_macro
from .memmap import TileMap
from .pim import ChannelState, run_micro_sequence

# lane operations per element for each vector kernel
VU_OPS_PER_ELEMENT = {
    "layernorm": 6,  # two passes: mean/variance, then normalize and scale
    "residual": 1,
    "softmax_masked": 4,  # mask, max-subtract, exp, sum/scale fused
    "gelu": 3,  # LUT lookup + linear interpolation
    "concat": 1,
}

UNITS = ("mu", "vu", "dma_ld", "dma_st", "pim")


def mu_tiles(k: int, n_out: int, hw: HardwareConfig) -> int:
    """Weight tiles the systolic array loads for a (k x n_out) weight."""
    if k <= 0 or n_out <= 0:
        return 0
    return math.ceil(k / (hw.mu_rows * hw.macs_per_pe)) * math.ceil(n_out / hw.mu_cols)


def mu_cycles(n_tokens: int, k: int, n_out: int, hw: HardwareConfig) -> int:
    """Systolic latency: per weight tile, fill + token stream + drain."""
    if n_tokens <= 0:
        return 0
    return mu_tiles(k, n_out, hw) * (hw.mu_rows + n_tokens + hw.mu_cols)


def mu_attn_cycles(n_tokens: int, k: int, n_out: int, hw: HardwareConfig) -> int:
    """Attention products with interleaved operands.

    When the reduction is shorter than the array's depth (QK^T with
    head_dim 64 against 512 MAC rows), several output blocks are interleaved
    along the rows, so tiles are counted by capacity rather than per block.
    """
    if n_tokens <= 0 or k <= 0 or n_out <= 0:
        return 0
    depth = hw.mu_rows * hw.macs_per_pe
    if k >= depth:
        return mu_cycles(n_tokens, k, n_out, hw)
    tiles = math.ceil(k * n_out / (depth * hw.mu_cols))
    return tiles * (hw.mu_rows + n_tokens + hw.mu_cols)


def mu_execute(cmd: Command, hw: HardwareConfig) -> tuple[float, int]:
    """Latency (ns) and MAC count of an MU command.

    Output scaling and bias are folded into the array's output stage at no
    extra cost; attention products use the transposed keys (or values) as
    the stationary operand.
    """
    o = cmd.operand
    n, k, n_out = o.n_tokens, o.weight_cols, o.weight_rows
    if cmd.kind is Kind.MU_ATTN:
        cycles = mu_attn_cycles(n, k, n_out, hw)
    else:
        cycles = mu_cycles(n, k, n_out, hw)
    return cycles * hw.npu_cycle_ns, n * k * n_out


def vu_cycles(op: str, elements: int, hw: HardwareConfig) -> int:
    if elements <= 0:
        return 0
    lane_ops = elements * VU_OPS_PER_ELEMENT[op]
    return hw.vu_startup_cycles + math.ceil(lane_ops / (hw.vu_lanes * hw.vu_width))


def vu_execute(cmd: Command, hw: HardwareConfig) -> tuple[float, int]:
    e = cmd.operand.elements
    return vu_cycles(cmd.op, e, hw) * hw.npu_cycle_ns, e * VU_OPS_PER_ELEMENT.get(cmd.op, 1)


def transpose_onchip(nbytes: int, hw: HardwareConfig, wm_free: int | None = None) -> float:
    """Duration (ns) of an AM -> WM move through the streaming buffer."""
    if nbytes < 0:
        raise ValueError("negative transfer size")
    if wm_free is not None and nbytes > wm_free:
        raise MemoryError(f"on-chip transpose of {nbytes} B exceeds free WM ({wm_free} B)")
    return math.ceil(nbytes / hw.onchip_bytes_per_cycle) * hw.npu_cycle_ns


# ---------------------------------------------------------------------------
# PIM control unit


@dataclass(frozen=True)
class Dispatch:
    micro: list
    noc_messages: int
    broadcast: bool
    completions: int


def pcu_dispatch(macro: Command, tiles: TileMap, hw: HardwareConfig, n_tokens: int | None = None) -> Dispatch:
    """Decode a macro and count the NoC messages needed to deliver it.

    When every PIM channel runs identical coordinates one broadcast message
    per micro command suffices; otherwise each target channel gets its own copy.
    """
    seq = expand_macro(macro, tiles, hw, n_tokens)
    bcast = tiles.broadcast
    per = 1 if bcast else len(tiles.channels)
    return Dispatch(seq, len(seq) * per, bcast, len(tiles.channels))


def _macro_signature(tiles: TileMap, op: str, n: int) -> tuple:
    nr, nc = tiles.grid
    last_cols = tiles.cols - (nc - 1) * tiles.cols_per_tile
    return (nr, nc, last_cols, len(tiles.channels), op, n)


@lru_cache(maxsize=4096)
def _macro_cycles_cached(hw: HardwareConfig, sig: tuple) -> tuple[int, tuple]:
    nr, nc, last_cols, nch, op, n = sig
    if n == 1 and nr > 4:
        # tile rows repeat the same commands; once the per-row step settles
        # the rest follow exactly, so only the first rows need replaying
        runs = [_replay(hw, (k, nc, last_cols, nch, op, 1)) for k in (2, 3, 4)]
        (e2, c2), (e3, c3), (e4, c4) = runs
        if e4 - e3 == e3 - e2 and all(b - a == d - b for a, b, d in zip(c2, c3, c4)):
            k = nr - 4
            return e4 + k * (e4 - e3), tuple(d + k * (d - b) for b, d in zip(c3, c4))
    return _replay(hw, sig)


def _replay(hw: HardwareConfig, sig: tuple) -> tuple[int, tuple]:
    nr, nc, last_cols, nch, op, n = sig
    # every channel of a macro runs the same sequence, so one channel suffices;
    # a one-bank-per-row map reproduces the tile grid
    chans = (0,)
    tm = TileMap("sig", nr, (nc - 1) * hw.elems_per_row + last_cols, chans,
                 1, hw.elems_per_row, 0, hw.elems_per_column)
    cmd = Command(-1, Kind.PIM_MACRO, op)
    seq = expand_macro(cmd, tm, hw, n)
    states = {c: ChannelState(hw, c) for c in chans}
    end = run_micro_sequence(states, seq, chans, 0)
    ev = states[0].events
    counts = (ev.pim_macs, ev.pim_activates, ev.pim_gb_writes, ev.pim_acc_reads, ev.pim_lut_activates)
    return end, counts


def macro_cycles(tiles: TileMap, op: str, n: int, hw: HardwareConfig) -> tuple[int, tuple]:
    """Cycles (tCK) for a macro on idle channels, plus per-channel event counts.

    Timing does not depend on which rows a tile holds, only on the tile grid,
    so results are cached by grid signature.
    """
    return _macro_cycles_cached(hw, _macro_signature(tiles, op, n))


# ---------------------------------------------------------------------------
# scheduler state


@dataclass
class CoreState:
    """Per-core command scheduler: a bounded pending window feeding issue queues."""

    core: int
    stream: list[Command]
    issue_slots: int
    pending_slots: int
    next_fetch: int = 0
    pending: dict[int, Command] = field(default_factory=dict)
    ready: dict[str, list] = field(default_factory=lambda: {u: [] for u in UNITS})
    issue: dict[str, deque] = field(default_factory=lambda: {u: deque() for u in UNITS})
    busy_until: dict[str, float] = field(default_factory=lambda: dict.fromkeys(UNITS, 0.0))
    busy_cmd: dict[str, int | None] = field(default_factory=lambda: dict.fromkeys(UNITS))
    max_issue: int = 0
    max_pending: int = 0
    dma_wait_flag: bool = False
    queued_at: dict[int, float] = field(default_factory=dict)

    def fetch(self, ndeps: dict[int, int]) -> None:
        while len(self.pending) < self.pending_slots and self.next_fetch < len(self.stream):
            cmd = self.stream[self.next_fetch]
            self.next_fetch += 1
            self.pending[cmd.id] = cmd
            if ndeps[cmd.id] == 0:
                heapq.heappush(self.ready[unit_of(cmd)], cmd.id)
        self.max_pending = max(self.max_pending, len(self.pending))

    def mark_ready(self, cmd: Command) -> None:
        if cmd.id in self.pending:
            heapq.heappush(self.ready[unit_of(cmd)], cmd.id)

    def promote(self, now: float = 0.0) -> None:
        """Move ready commands (oldest first) into their unit's issue queue."""
        for u in UNITS:
            q, r = self.issue[u], self.ready[u]
            while r and len(q) < self.issue_slots:
                cid = heapq.heappop(r)
                q.append(self.pending.pop(cid))
                self.queued_at[cid] = now
            self.max_issue = max(self.max_issue, len(q))

    def idle(self, unit: str, now: float) -> bool:
        return self.busy_cmd[unit] is None


def unit_of(cmd: Command) -> str:
    u = cmd.unit
    return "dma_ld" if u == "dma_xpose" else u


def scheduler_tick(core: CoreState, ndeps: dict[int, int], now: float) -> list[Command]:
    """Refill the pending window and return issue-queue heads whose unit is idle.

    The engine decides whether each head may actually start (off-chip DMAs
    wait while a PIM macro owns the memory).
    """
    core.fetch(ndeps)
    core.promote(now)
    heads = []
    for u in UNITS:
        if core.issue[u] and core.idle(u, now):
            heads.append(core.issue[u][0])
    return heads
