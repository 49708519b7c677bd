"""PIM-aware weight tiling, DRAM address mapping and parameter allocation.

Physical addresses follow a Row | Channel | Bank | Column | offset layout
(MSB to LSB). A weight tile is ``banks x channels`` matrix rows by up to one
DRAM row of columns; its matrix rows are spread one per (channel, bank) pair
and all share a single DRAM row address, so a tile never causes a row
conflict while the PIM works on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

from .config import HardwareConfig, ModelConfig


class AllocationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhysAddr:
    row: int
    channel: int
    bank: int
    column: int
    byte_offset: int = 0


@dataclass(frozen=True)
class TilePlacement:
    index: int  # row-major linear index inside the matrix
    row_tile: int
    col_tile: int
    n_rows: int
    n_cols: int
    dram_row: int
    last_in_row: bool


@dataclass(frozen=True)
class TileMap:
    matrix_id: str
    rows: int
    cols: int
    channels: tuple[int, ...]
    banks_per_channel: int
    cols_per_tile: int
    base_row: int
    elems_per_column: int
    broadcast: bool = False

    @property
    def rows_per_tile(self) -> int:
        return self.banks_per_channel * len(self.channels)

    @property
    def grid(self) -> tuple[int, int]:
        if self.rows == 0 or self.cols == 0:
            return (0, 0)
        return (math.ceil(self.rows / self.rows_per_tile), math.ceil(self.cols / self.cols_per_tile))

    @property
    def num_tiles(self) -> int:
        r, c = self.grid
        return r * c

    def tile(self, index: int) -> TilePlacement:
        nr, nc = self.grid
        if not 0 <= index < nr * nc:
            raise IndexError(f"tile {index} out of range for {self.matrix_id} ({nr}x{nc})")
        rt, ct = divmod(index, nc)
        return TilePlacement(
            index=index,
            row_tile=rt,
            col_tile=ct,
            n_rows=min(self.rows_per_tile, self.rows - rt * self.rows_per_tile),
            n_cols=min(self.cols_per_tile, self.cols - ct * self.cols_per_tile),
            dram_row=self.base_row + index,
            last_in_row=ct == nc - 1,
        )

    def iter_tiles(self) -> Iterator[TilePlacement]:
        for i in range(self.num_tiles):
            yield self.tile(i)

    @property
    def dram_rows_used(self) -> int:
        return self.num_tiles

    def occupied_bytes(self, row_size: int) -> int:
        return self.num_tiles * self.rows_per_tile * row_size

    def used_bytes(self, dtype_bytes: int = 2) -> int:
        return self.rows * self.cols * dtype_bytes

    def row_bytes_per_channel(self, r0: int = 0, r1: int | None = None, dtype_bytes: int = 2) -> dict[int, int]:
        """Bytes stored on each channel for matrix rows ``[r0, r1)``."""
        r1 = self.rows if r1 is None else r1
        per = dict.fromkeys(self.channels, 0)
        rpt = self.rows_per_tile
        b = self.banks_per_channel
        for k, ch in enumerate(self.channels):
            lo, hi = k * b, (k + 1) * b
            per[ch] = _periodic_overlap(r0, r1, rpt, lo, hi) * self.cols * dtype_bytes
        return per

    def activations(self, r0: int = 0, r1: int | None = None) -> int:
        """Bank rows that must be opened to stream matrix rows ``[r0, r1)``."""
        r1 = self.rows if r1 is None else r1
        return max(0, r1 - r0) * self.grid[1]


def _periodic_overlap(start: int, end: int, period: int, lo: int, hi: int) -> int:
    """Count integers x in [start, end) with lo <= x mod period < hi."""

    def f(x: int) -> int:
        q, r = divmod(x, period)
        return q * (hi - lo) + min(max(r - lo, 0), hi - lo)

    if end <= start:
        return 0
    return f(end) - f(start)


# ---------------------------------------------------------------------------


def tile_weight_matrix(rows: int, cols: int, hw: HardwareConfig, *, matrix_id: str = "w",
                       channels: tuple[int, ...] | None = None, base_row: int = 0) -> TileMap:
    if rows <= 0 or cols <= 0:
        raise ValueError(f"matrix {matrix_id}: rows and cols must be positive, got {rows}x{cols}")
    channels = tuple(channels) if channels is not None else hw.pim_channels() or tuple(range(hw.num_channels))
    all_pim = tuple(hw.pim_channels())
    return TileMap(
        matrix_id=matrix_id,
        rows=rows,
        cols=cols,
        channels=channels,
        banks_per_channel=hw.banks_per_channel,
        cols_per_tile=hw.elems_per_row,
        base_row=base_row,
        elems_per_column=hw.elems_per_column,
        broadcast=len(channels) > 1 and channels == all_pim,
    )


def tile_coords(tm: TileMap, row_in_tile: int) -> tuple[int, int]:
    """(channel, bank) holding a tile row; bank index varies fastest."""
    ch_idx, bank = divmod(row_in_tile, tm.banks_per_channel)
    return tm.channels[ch_idx], bank


def map_address(tm: TileMap, tile_idx: int, row_in_tile: int, col_in_tile: int, dtype_bytes: int = 2) -> PhysAddr:
    t = tm.tile(tile_idx)
    if not 0 <= row_in_tile < t.n_rows:
        raise IndexError(f"row {row_in_tile} outside tile {tile_idx} of {tm.matrix_id} ({t.n_rows} rows)")
    if not 0 <= col_in_tile < t.n_cols:
        raise IndexError(f"column {col_in_tile} outside tile {tile_idx} of {tm.matrix_id} ({t.n_cols} cols)")
    channel, bank = tile_coords(tm, row_in_tile)
    column, elem = divmod(col_in_tile, tm.elems_per_column)
    return PhysAddr(row=t.dram_row, channel=channel, bank=bank, column=column,
                    byte_offset=elem * dtype_bytes)


class AddressMapper:
    """Linear byte addresses over a set of channels, Row|Channel|Bank|Column|offset."""

    def __init__(self, hw: HardwareConfig, channels: tuple[int, ...]):
        self.channels = tuple(channels)
        self.banks = hw.banks_per_channel
        self.row_size = hw.row_size
        self.column_bytes = hw.column_bytes
        self.row_stride = len(self.channels) * self.banks * self.row_size

    def decode(self, addr: int) -> PhysAddr:
        off = addr % self.column_bytes
        col = (addr // self.column_bytes) % (self.row_size // self.column_bytes)
        unit = addr // self.row_size
        bank = unit % self.banks
        ch_idx = (unit // self.banks) % len(self.channels)
        row = unit // (self.banks * len(self.channels))
        return PhysAddr(row=row, channel=self.channels[ch_idx], bank=bank, column=col, byte_offset=off)

    def encode(self, pa: PhysAddr) -> int:
        ch_idx = self.channels.index(pa.channel)
        unit = (pa.row * len(self.channels) + ch_idx) * self.banks + pa.bank
        return unit * self.row_size + pa.column * self.column_bytes + pa.byte_offset

    def spread(self, start: int, nbytes: int) -> tuple[dict[int, int], dict[int, int]]:
        """Per-channel (bytes, bank-row activations) for a linear region."""
        end = start + nbytes
        chunk = self.banks * self.row_size
        period = chunk * len(self.channels)
        by = {}
        acts = {}
        u0, u1 = start // self.row_size, -(-end // self.row_size)
        for k, ch in enumerate(self.channels):
            by[ch] = _periodic_overlap(start, end, period, k * chunk, (k + 1) * chunk)
            acts[ch] = _periodic_overlap(u0, u1, len(self.channels) * self.banks, k * self.banks, (k + 1) * self.banks) if nbytes else 0
        return by, acts


# ---------------------------------------------------------------------------
# allocation


@dataclass
class Placement:
    name: str
    nbytes: int
    region: str  # "pim_rows" or "plain_rows"
    tile_map: TileMap | None = None
    plain_start: int | None = None  # address in the normal (plain) domain
    duplicated: bool = False
    npu_only: bool = False
    fc: bool = False


@dataclass
class AllocationPlan:
    mode: str
    placements: dict[str, Placement] = field(default_factory=dict)
    pim_rows_used: dict[int, int] = field(default_factory=dict)
    plain_bytes: int = 0
    pim_bytes: int = 0
    fragmentation_bytes: int = 0
    plain_channels: tuple[int, ...] = ()
    plain_base: int = 0

    def __contains__(self, name: str) -> bool:
        return name in self.placements

    def __getitem__(self, name: str) -> Placement:
        return self.placements[name]

    @property
    def footprint(self) -> int:
        return self.plain_bytes + self.pim_bytes

    def tiles(self) -> list[TileMap]:
        return [p.tile_map for p in self.placements.values() if p.tile_map is not None]


@dataclass(frozen=True)
class FCWeight:
    name: str
    rows: int  # output features
    cols: int  # input features
    channels: tuple[int, ...]
    block: int


def _core_split(total: int, parts: int) -> list[tuple[int, int]]:
    """Split ``total`` into ``parts`` contiguous ranges, sizes differing by at most one."""
    base, extra = divmod(total, parts)
    out, lo = [], 0
    for i in range(parts):
        hi = lo + base + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def head_channels(hw: HardwareConfig, core: int) -> tuple[int, ...]:
    """PIM channels serving a core's attention heads (one chip per core, wrapping)."""
    pim = hw.pim_channels()
    if not pim:
        return ()
    chips = len(pim) // hw.channels_per_chip
    chip = core % chips
    return pim[chip * hw.channels_per_chip:(chip + 1) * hw.channels_per_chip]


def heads_of_core(model: ModelConfig, hw: HardwareConfig, core: int, n_devices: int = 1) -> range:
    heads = model.num_heads // n_devices
    per = heads // hw.num_cores
    return range(core * per, (core + 1) * per)


def fc_weights(model: ModelConfig, hw: HardwareConfig, n_devices: int = 1) -> list[FCWeight]:
    """FC weight matrices one device holds, already partitioned per core.

    Q/K/V weights are split per attention head and sit on the owning core's
    PIM chip; the other FCs are split by output columns across cores and
    span every PIM channel.
    """
    d, hd = model.embedding_dim, model.head_dim
    pim = hw.pim_channels()
    out: list[FCWeight] = []
    dev_d = d // n_devices
    dev_ffn = model.ffn_dim // n_devices
    for b in range(model.num_blocks):
        for c in range(hw.num_cores):
            ch = head_channels(hw, c)
            for h in heads_of_core(model, hw, c, n_devices):
                for w in ("q", "k", "v"):
                    out.append(FCWeight(f"b{b}.{w}.h{h}", hd, d, ch, b))
        for w, rows, cols in (("proj", dev_d, d), ("ffn1", dev_ffn, d), ("ffn2", dev_d, model.ffn_dim)):
            for c, (lo, hi) in enumerate(_core_split(rows, hw.num_cores)):
                if hi > lo:
                    out.append(FCWeight(f"b{b}.{w}.c{c}", hi - lo, cols, pim, b))
    if model.family == "gpt":
        vocab = -(-model.vocab_size // n_devices)
        for c, (lo, hi) in enumerate(_core_split(vocab, hw.num_cores)):
            out.append(FCWeight(f"lm_head.c{c}", hi - lo, d, pim, model.num_blocks))
    return out


def non_fc_params(model: ModelConfig, n_devices: int = 1) -> dict[str, int]:
    """Element counts of parameters that never run on PIM."""
    d = model.embedding_dim
    out = {
        "pos_embedding": model.max_positions * d,
        "biases_and_norms": model.num_blocks * 13 * d // n_devices + 2 * d,
    }
    if model.family == "bert":
        out["token_embedding"] = model.vocab_size * d + 2 * d
        out["qa_head"] = 2 * d + 2
    return out


def param_count(model: ModelConfig) -> int:
    """Closed-form parameter count (weights, biases, norms, embeddings)."""
    d = model.embedding_dim
    n = model.num_blocks * (12 * d * d + 13 * d) + model.vocab_size * d + model.max_positions * d + 2 * d
    if model.family == "bert":
        n += 2 * d + 2 * d + 2
    return n


def kv_cache_bytes(model: ModelConfig, n_devices: int = 1) -> int:
    heads = model.num_heads // n_devices
    return 2 * model.num_blocks * heads * model.max_positions * model.head_dim * model.dtype_bytes


def kv_rows(model: ModelConfig, hw: HardwareConfig, n_devices: int = 1) -> tuple[int, int]:
    """(positions per DRAM row, row groups per head) of the KV-cache layout."""
    per_row = max(1, hw.row_size // (model.head_dim * model.dtype_bytes))
    return per_row, -(-model.max_positions // per_row)


def kv_span(model: ModelConfig, hw: HardwareConfig, n_devices: int = 1) -> int:
    """Bytes the KV-cache layout occupies (rows are padded per head)."""
    _, groups = kv_rows(model, hw, n_devices)
    return 2 * model.num_blocks * groups * (model.num_heads // n_devices) * hw.row_size


def kv_segments(plan: "AllocationPlan", model: ModelConfig, hw: HardwareConfig, block: int, head: int,
                which: int, p0: int, p1: int, n_devices: int = 1) -> list[tuple[int, int]]:
    """Linear ``(start, nbytes)`` pieces holding positions ``[p0, p1)`` of one head's K or V cache.

    The cache is interleaved across heads one DRAM row at a time: a row holds
    consecutive positions of a single head and the next row belongs to the
    next head. A head's stream therefore strides over every channel and bank
    instead of sitting in one channel's rows.
    """
    per_row, groups = kv_rows(model, hw, n_devices)
    heads = model.num_heads // n_devices
    eb = model.head_dim * model.dtype_bytes
    base = plan["kv_cache"].plain_start
    out: list[tuple[int, int]] = []
    p = p0
    while p < p1:
        g, off = divmod(p, per_row)
        n = min(p1 - p, per_row - off)
        row = ((block * 2 + which) * groups + g) * heads + head
        out.append((base + row * hw.row_size + off * eb, n * eb))
        p += n
    return out


class _RowAllocator:
    def __init__(self, hw: HardwareConfig, channels: tuple[int, ...], bounded: bool = True):
        self.hw = hw
        self.bounded = bounded
        self.next_row = dict.fromkeys(channels, 0)
        self.rows_per_bank = hw.chip_capacity // hw.channels_per_chip // (hw.banks_per_channel * hw.row_size)

    def place(self, fw: FCWeight) -> TileMap | None:
        base = max(self.next_row[c] for c in fw.channels)
        tm = tile_weight_matrix(fw.rows, fw.cols, self.hw, matrix_id=fw.name,
                                channels=fw.channels, base_row=base)
        if self.bounded and base + tm.num_tiles > self.rows_per_bank:
            return None
        for c in fw.channels:
            self.next_row[c] = base + tm.num_tiles
        return tm


def plan_allocation(model: ModelConfig | None, hw: HardwareConfig, mode: str | None = None,
                    n_devices: int = 1, check_capacity: bool = True) -> AllocationPlan:
    """Place every parameter (plus the KV cache) of one device.

    * unified - FC weights tiled once in PIM rows; the rest linear above them.
    * partitioned - FC weights tiled in the PIM half and duplicated linearly
      in the plain half while capacity lasts; FCs that miss the PIM half are
      NPU-only, FCs that miss the plain half are read back from PIM rows.
    * plain - everything linear; no PIM.
    """
    mode = mode or hw.memory_mode
    if mode != hw.memory_mode:
        hw = hw.with_mode(mode)
    plan = AllocationPlan(mode=mode)
    if model is None:
        return plan
    dt = model.dtype_bytes
    per_channel = hw.chip_capacity // hw.channels_per_chip
    weights = fc_weights(model, hw, n_devices)
    others = non_fc_params(model, n_devices)
    kv = kv_cache_bytes(model, n_devices)

    plain_channels = hw.normal_channels()
    plan.plain_channels = plain_channels
    plain_cap = per_channel * len(plain_channels)
    pim_cap = per_channel * len(hw.pim_channels())

    if mode == "plain":
        addr = 0
        for s in weights:
            nbytes = s.rows * s.cols * dt
            plan.placements[s.name] = Placement(s.name, nbytes, "plain_rows", plain_start=addr, fc=True)
            addr += _align(nbytes, hw.row_size)
        plan.plain_bytes = addr
    else:
        # an unchecked unified plan models a device with as many rows as needed
        rows = _RowAllocator(hw, hw.pim_channels(), bounded=check_capacity or mode != "unified")
        for s in weights:
            nbytes = s.rows * s.cols * dt
            tm = rows.place(s)
            if tm is None:
                if mode == "unified" and check_capacity:
                    raise AllocationError(
                        f"matrix {s.name} does not fit in PIM rows; model needs more devices")
                plan.placements[s.name] = Placement(s.name, nbytes, "plain_rows", npu_only=True, fc=True)
                continue
            plan.placements[s.name] = Placement(s.name, nbytes, "pim_rows", tile_map=tm, fc=True)
            plan.pim_bytes += nbytes
            plan.fragmentation_bytes += tm.occupied_bytes(hw.row_size) - tm.used_bytes(dt)
        plan.pim_rows_used = dict(rows.next_row)
        if mode == "unified":
            # linear region starts above the tallest tiled column of rows
            top = max(rows.next_row.values(), default=0)
            plan.plain_base = top * len(plain_channels) * hw.banks_per_channel * hw.row_size
        addr = plan.plain_base
        # non-FC data first, then duplicated FC copies while room remains
        fixed = sum(others.values()) * dt + kv
        if mode == "partitioned":
            for s in weights:
                p = plan.placements[s.name]
                if p.npu_only:
                    need = _align(p.nbytes, hw.row_size)
                    p.plain_start = addr
                    addr += need
            budget = plain_cap - fixed
            for s in weights:
                p = plan.placements[s.name]
                if p.npu_only:
                    continue
                need = _align(p.nbytes, hw.row_size)
                if addr + need <= budget:
                    p.plain_start = addr
                    p.duplicated = True
                    addr += need
            plan.plain_bytes = sum(p.nbytes for p in plan.placements.values()
                                   if p.plain_start is not None)
        else:
            plan.plain_bytes = 0

    addr = max(addr, plan.plain_base)
    # the GPT token embedding is tied to the LM head and lives with it
    for name, elems in others.items():
        nbytes = elems * dt
        plan.placements[name] = Placement(name, nbytes, "plain_rows", plain_start=addr)
        addr += _align(nbytes, hw.row_size)
        plan.plain_bytes += nbytes
    period = hw.banks_per_channel * hw.row_size * max(1, len(plain_channels))
    addr = _align(addr, period)
    plan.placements["kv_cache"] = Placement("kv_cache", kv, "plain_rows", plain_start=addr)
    addr += kv_span(model, hw, n_devices)

    if check_capacity:
        if mode == "partitioned":
            used_plain = addr
            if used_plain > plain_cap:
                raise AllocationError(
                    f"model {model.name} exceeds plain memory ({used_plain} > {plain_cap} bytes); "
                    "use more devices")
        elif addr > plain_cap:
            raise AllocationError(
                f"model {model.name} exceeds device capacity ({addr} > {plain_cap} bytes); "
                "use more devices")
    return plan


def _align(n: int, a: int) -> int:
    return -(-n // a) * a


def tied_lm_head_bytes(model: ModelConfig) -> int:
    return model.vocab_size * model.embedding_dim * model.dtype_bytes
