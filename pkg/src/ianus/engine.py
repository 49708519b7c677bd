"""Discrete-event simulation of one IANUS device (or a group linked over PCIe).

Events are command begin/end points. Off-chip traffic is served by a
per-channel reservation table: each DMA and PIM macro claims its channels
first-come first-served. In unified mode a macro additionally waits for every
in-flight off-chip DMA and no off-chip DMA may start before the last reserved
macro completes, which is how the scheduler keeps PIM execution
uninterrupted. ``trace=True`` replays every reservation through the
bank-level channel model instead of the closed-form stream timing.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .compiler import CompileOptions, Stage, StagePlan, build_commands
from .config import HardwareConfig, ModelConfig
from .isa import Command, Kind, expand_macro
from .memmap import AllocationPlan, plan_allocation
from .npu import CoreState, macro_cycles, mu_execute, scheduler_tick, transpose_onchip, unit_of, vu_execute
from .pim import ChannelState, EnergyEvents, TraceRecord, run_micro_sequence, stream_cycles


class DeadlockError(RuntimeError):
    pass


@dataclass
class Interval:
    kind: str  # "dma" or "pim"
    start: float
    end: float
    channels: tuple[int, ...]
    cmd: int


@dataclass
class ExecRecord:
    cmd: Command
    start: float
    end: float
    gate: int | None


class MemorySystem:
    """Channel reservation table shared by every core of one device."""

    def __init__(self, hw: HardwareConfig, t0: float = 0.0, trace: bool = False):
        self.hw = hw
        self.unified = hw.memory_mode == "unified"
        n = hw.num_channels
        self.free = [t0] * n  # every bank precharged (a macro may start)
        self.bus = [t0] * n  # last normal data burst done
        self.pim_cmds: set[int] = set()
        self.owner: list[int | None] = [None] * n
        self.t0 = t0
        # blocking is tracked per issuing core (or once per device)
        self.per_core = hw.pim_block_scope == "core"
        self._pim: dict[int, tuple[float, int | None]] = {}
        self._dma: dict[int, tuple[float, int | None]] = {}
        self.events = EnergyEvents()
        self.intervals: list[Interval] = []
        self.noc_messages = 0
        self.trace = trace
        self.channels = {c: ChannelState(hw, c, record=True) for c in range(n)} if trace else {}
        self.tck = hw.timing.tCK

    # -- DMA -------------------------------------------------------------
    def _units(self, cmd: Command) -> dict[int, list[tuple[int, int, int]]]:
        """Bank-row units (bank, row, columns) per channel for trace replay."""
        hw = self.hw
        reg = cmd.operand.region
        out: dict[int, list] = {}
        if not reg:
            return out
        if reg[0] in ("linear", "segments"):
            from .memmap import AddressMapper
            segs = [reg[1:]] if reg[0] == "linear" else reg[1]
            chans = hw.normal_channels() if hw.memory_mode != "plain" else tuple(range(hw.num_channels))
            mapper = AddressMapper(hw, chans)
            for start, nbytes in segs:
                a, end = start, start + nbytes
                while a < end:
                    pa = mapper.decode(a)
                    row_end = a - pa.column * hw.column_bytes - pa.byte_offset + hw.row_size
                    stop = min(end, row_end)
                    ncols = math.ceil((stop - a + pa.byte_offset) / hw.column_bytes)
                    out.setdefault(pa.channel, []).append((pa.bank, pa.row % self._rows_per_bank(), ncols))
                    a = stop
        else:
            _, tm, r0, r1 = reg
            from .memmap import tile_coords
            ncol_tiles = tm.grid[1]
            for r in range(r0, r1):
                rt, rin = divmod(r, tm.rows_per_tile)
                ch, bank = tile_coords(tm, rin)
                for ct in range(ncol_tiles):
                    t = tm.tile(rt * ncol_tiles + ct)
                    out.setdefault(ch, []).append((bank, t.dram_row, math.ceil(t.n_cols / tm.elems_per_column)))
        return out

    def _rows_per_bank(self) -> int:
        hw = self.hw
        return hw.chip_capacity // hw.channels_per_chip // (hw.banks_per_channel * hw.row_size)

    def _key(self, cmd: Command) -> int:
        return cmd.core if self.per_core else 0

    def pim_until(self, cmd: Command) -> tuple[float, int | None]:
        """End and owner of the latest PIM macro that blocks ``cmd``'s DMAs."""
        return self._pim.get(self._key(cmd), (self.t0, None))

    def must_wait(self, cmd: Command, now: float) -> bool:
        """Off-chip DMAs wait while a PIM macro of the same scheduler is running."""
        return self.unified and self.pim_until(cmd)[0] > now

    def reserve_dma(self, cmd: Command, now: float, issued: float | None = None
                    ) -> tuple[float, float, list[tuple[float, int | None]]]:
        hw, o = self.hw, cmd.operand
        write = cmd.op == "store"
        # controller setup overlaps any time spent waiting
        t0 = max(now, (now if issued is None else issued) + hw.dma_overhead_ns)
        floor = self.pim_until(cmd)[0] if self.unified else t0
        blockers = [self.pim_until(cmd)] if self.unified else []
        units = self._units(cmd) if self.trace else {}
        starts, ends = [], []
        rcd = hw.timing.tRCDWR if write else hw.timing.tRCDRD
        for ch, nbytes in zip(o.channels, o.bytes_per_channel):
            # the next transfer opens its rows (other banks) under the previous one's data
            s = max(t0, floor, self.bus[ch] - rcd)
            if self.owner[ch] is not None and self.owner[ch] in self.pim_cmds:
                s = max(s, self.free[ch])
            blockers.append((s, self.owner[ch]) if s > t0 else (self.free[ch], None))
            if self.trace and units.get(ch):
                state = self.channels[ch]
                e = state.stream(units[ch], write, math.ceil(s / self.tck)) * self.tck
                data_end = e
            else:
                ncols = math.ceil(nbytes / hw.column_bytes)
                e = s + stream_cycles(hw, ncols, write) * self.tck
                data_end = s + rcd + ncols * hw.timing.tCCD_S
            self.bus[ch] = max(self.bus[ch], data_end)
            self.free[ch], self.owner[ch] = max(self.free[ch], e), cmd.id
            starts.append(s)
            ends.append(e)
            cols = math.ceil(nbytes / hw.column_bytes)
            if not self.trace:
                if write:
                    self.events.dram_writes += cols
                else:
                    self.events.dram_reads += cols
        if not self.trace:
            self.events.dram_activates += o.activations
        if not starts:
            return t0, t0, blockers
        s, e = min(starts), max(ends)
        k = self._key(cmd)
        if e > self._dma.get(k, (self.t0, None))[0]:
            self._dma[k] = (e, cmd.id)
        self.intervals.append(Interval("dma", s, e, tuple(o.channels), cmd.id))
        return s, e, blockers

    # -- PIM -------------------------------------------------------------
    def reserve_macro(self, cmd: Command, now: float) -> tuple[float, float, list[tuple[float, int | None]]]:
        hw, tm = self.hw, cmd.tiles
        n = max(1, cmd.operand.n_tokens)
        chans = tm.channels
        s = now + hw.noc_hop_ns  # macro decode + broadcast over the NoC
        blockers = []
        for ch in chans:
            s = max(s, self.free[ch])
            blockers.append((self.free[ch], self.owner[ch]))
        if self.unified:
            du = self._dma.get(self._key(cmd), (self.t0, None))
            s = max(s, du[0])
            blockers.append(du)
        cyc, counts = macro_cycles(tm, cmd.op, n, hw)
        if self.trace:
            seq = expand_macro(cmd, tm, hw, n)
            start_c = math.ceil(s / self.tck)
            s = start_c * self.tck
            e = run_micro_sequence(self.channels, seq, chans, start_c) * self.tck
        else:
            e = s + cyc * self.tck
            macs, acts, gbw, accs, luts = counts
            k = len(chans)
            self.events.pim_macs += macs * k
            self.events.pim_activates += acts * k
            self.events.pim_gb_writes += gbw * k
            self.events.pim_acc_reads += accs * k
            self.events.pim_lut_activates += luts * k
        macs, acts, gbw, accs, luts = counts
        per_channel_msgs = macs + gbw + 2 * (acts // hw.banks_per_channel) + \
            (accs + luts) // hw.banks_per_channel
        self.noc_messages += per_channel_msgs * (1 if tm.broadcast else len(chans))
        for ch in chans:
            self.free[ch], self.owner[ch] = e, cmd.id
            self.bus[ch] = e
        self.pim_cmds.add(cmd.id)
        k = self._key(cmd)
        if e > self._pim.get(k, (self.t0, None))[0]:
            self._pim[k] = (e, cmd.id)
        self.intervals.append(Interval("pim", s, e, tuple(chans), cmd.id))
        return s, e, blockers

    def finalize(self) -> None:
        if self.trace:
            for st in self.channels.values():
                self.events.add(st.events)

    def trace_records(self) -> list[TraceRecord]:
        recs = [r for st in self.channels.values() for r in st.trace]
        recs.sort(key=lambda r: (r.cycle, r.channel, r.bank if r.bank is not None else -1))
        return recs


# ---------------------------------------------------------------------------


@dataclass
class StageResult:
    stage: Stage
    start: float
    end: float
    records: dict[int, ExecRecord]
    events: EnergyEvents
    mu_macs: int
    vu_ops: int
    onchip_bytes: int
    busy: dict[str, float]
    breakdown: dict[str, float]
    noc_messages: int
    noc_bytes: int
    link_bytes: int
    intervals: list[Interval]
    trace: list[TraceRecord]
    max_issue: int
    max_pending: int
    pim_macros: int

    @property
    def elapsed(self) -> float:
        return self.end - self.start


def sync_cost(cmd: Command, hw: HardwareConfig, n_devices: int = 1) -> tuple[float, int]:
    """Latency (ns) and PCIe bytes of one synchronization barrier."""
    t = 2 * hw.noc_hop_ns + cmd.sync_bytes / hw.noc_bytes_per_ns
    link = 0
    if n_devices > 1:
        # ring all-gather through the host: n-1 steps, each device->host->device
        chunk = cmd.sync_bytes / n_devices
        step = 2 * (hw.pcie_latency_ns + chunk / hw.pcie_bw * 1e9)
        t += (n_devices - 1) * step
        link = int((n_devices - 1) * chunk * n_devices)
    return t, link


def simulate_stage(plan: StagePlan, hw: HardwareConfig, t0: float = 0.0, trace: bool = False) -> StageResult:
    cmds = plan.commands
    by_id = {c.id: c for c in cmds}
    ndeps = {c.id: len(c.deps) for c in cmds}
    dependents: dict[int, list[int]] = {c.id: [] for c in cmds}
    for c in cmds:
        for d in c.deps:
            dependents[d].append(c.id)
    cores = {k: CoreState(k, plan.per_core[k], hw.issue_queue_slots, hw.pending_queue_slots)
             for k in plan.per_core}
    mem = MemorySystem(hw, t0, trace)
    records: dict[int, ExecRecord] = {}
    unit_prev: dict[tuple[int, str], int] = {}
    busy: dict[str, float] = {}
    heap: list[tuple[float, int]] = []
    now = t0
    done = 0
    mu_macs = vu_ops = onchip = 0
    noc_bytes = link_bytes = 0
    pim_macros = 0

    wakes: set[float] = set()

    def wake(t: float) -> None:
        if t not in wakes:
            wakes.add(t)
            heapq.heappush(heap, (t, -1))

    def gate_of(c: Command, extra: Sequence[tuple[float, int | None]] = ()) -> int | None:
        best, gid = -math.inf, None
        for d in c.deps:
            r = records[d]
            if r.end > best:
                best, gid = r.end, d
        for u in _units_of(c):
            p = unit_prev.get((c.core, u))
            if p is not None and records[p].end > best:
                best, gid = records[p].end, p
        for tend, owner in extra:
            if owner is not None and owner in records and tend > best:
                best, gid = tend, owner
        return gid

    def begin(c: Command, start: float, end: float, extra=()) -> None:
        nonlocal pim_macros
        records[c.id] = ExecRecord(c, start, end, gate_of(c, extra))
        for u in _units_of(c):
            if c.core >= 0:
                cores[c.core].busy_cmd[u] = c.id
                unit_prev[(c.core, u)] = c.id
                busy[u] = busy.get(u, 0.0) + (end - start)
        if c.kind is Kind.PIM_MACRO:
            pim_macros += 1
        heapq.heappush(heap, (end, c.id))

    def try_start(c: Command) -> bool:
        nonlocal mu_macs, vu_ops, onchip, noc_bytes, link_bytes
        core = cores[c.core]
        if c.kind is Kind.DMA and c.op == "onchip_transpose":
            if core.busy_cmd["dma_st"] is not None:
                return False
            core.issue["dma_ld"].popleft()
            core.queued_at.pop(c.id, None)
            onchip += c.operand.nbytes
            begin(c, now, now + transpose_onchip(c.operand.nbytes, hw))
            return True
        q = core.issue[unit_of(c)]
        q.popleft()
        if c.kind in (Kind.MU_FC, Kind.MU_ATTN):
            dur, macs = mu_execute(c, hw)
            mu_macs += macs
            begin(c, now, now + dur)
        elif c.kind is Kind.VU:
            dur, ops = vu_execute(c, hw)
            vu_ops += ops
            begin(c, now, now + dur)
        elif c.kind is Kind.DMA:
            noc_bytes += c.operand.nbytes
            # descriptor setup overlaps the previous transfer on this engine
            queued = core.queued_at.pop(c.id, now)
            if mem.must_wait(c, now):
                # held in the unit until the PIM side goes idle
                core.busy_cmd[unit_of(c)] = c.id
                core.dma_wait_flag = True
                waiting.append((c, queued))
                wake(mem.pim_until(c)[0])
            else:
                s, e, blk = mem.reserve_dma(c, now, queued)
                begin(c, now, e, blk)
        elif c.kind is Kind.PIM_MACRO:
            s, e, blk = mem.reserve_macro(c, now)
            begin(c, now, e, blk)
        else:  # pragma: no cover
            raise ValueError(c.kind)
        return True

    def start_sync(c: Command) -> None:
        nonlocal link_bytes, noc_bytes
        dur, link = sync_cost(c, hw, plan.n_devices)
        link_bytes += link
        noc_bytes += c.sync_bytes
        begin(c, now, now + dur)

    # device-level commands with no deps start immediately
    for c in cmds:
        if c.core < 0 and ndeps[c.id] == 0:
            start_sync(c)

    def release_waiting() -> bool:
        """Start held DMAs whose blocking macro has finished, oldest first."""
        released = False
        keep = []
        for c, issued in waiting:
            if mem.must_wait(c, now):
                keep.append((c, issued))
                continue
            s, e, blk = mem.reserve_dma(c, now, issued)
            begin(c, issued, e, blk + [mem.pim_until(c)])
            released = True
        waiting[:] = keep
        for c, _ in keep:
            wake(mem.pim_until(c)[0])
        for core in cores.values():
            core.dma_wait_flag = any(w.core == core.core for w, _ in keep)
        return released

    waiting: list[tuple[Command, float]] = []
    total = len(cmds)
    while True:
        progress = True
        while progress:
            progress = release_waiting()
            for core in cores.values():
                for c in scheduler_tick(core, ndeps, now):
                    if try_start(c):
                        progress = True
        if done == total:
            break
        if not heap:
            stuck = [c for c in cmds if c.id not in records][:12]
            raise DeadlockError("no runnable command; stuck: " + "; ".join(c.describe() for c in stuck))
        t = heap[0][0]
        if t - now > hw.deadlock_budget_ns:
            raise DeadlockError(f"no progress for {t - now:.0f} ns at t={now:.0f}")
        now = t
        while heap and heap[0][0] == now:
            _, cid = heapq.heappop(heap)
            if cid < 0:
                wakes.discard(now)
                continue  # wake-up for waiting DMAs
            c = by_id[cid]
            done += 1
            if c.core >= 0:
                core = cores[c.core]
                for u in _units_of(c):
                    if core.busy_cmd[u] == cid:
                        core.busy_cmd[u] = None
            for nxt in dependents[cid]:
                ndeps[nxt] -= 1
                if ndeps[nxt] == 0:
                    n = by_id[nxt]
                    if n.core < 0:
                        start_sync(n)
                    else:
                        cores[n.core].mark_ready(n)
    mem.finalize()
    end = max((r.end for r in records.values()), default=t0)
    return StageResult(
        stage=plan.stage, start=t0, end=end, records=records, events=mem.events, mu_macs=mu_macs,
        vu_ops=vu_ops, onchip_bytes=onchip, busy=busy, breakdown=critical_path(records, t0),
        noc_messages=mem.noc_messages, noc_bytes=noc_bytes, link_bytes=link_bytes,
        intervals=mem.intervals, trace=mem.trace_records() if trace else [],
        max_issue=max((c.max_issue for c in cores.values()), default=0),
        max_pending=max((c.max_pending for c in cores.values()), default=0),
        pim_macros=pim_macros)


def _units_of(c: Command) -> tuple[str, ...]:
    if c.core < 0:
        return ()
    if c.kind is Kind.DMA and c.op == "onchip_transpose":
        return ("dma_ld", "dma_st")
    return (unit_of(c),)


def critical_path(records: dict[int, ExecRecord], t0: float) -> dict[str, float]:
    """Attribute stage time to op classes along the gating chain.

    Starting from the last command to finish, each command owns the span
    from its gate's completion to its own; the spans telescope, so they sum
    to the stage's wall time exactly.
    """
    if not records:
        return {}
    out: dict[str, float] = {}
    cur = max(records.values(), key=lambda r: (r.end, r.cmd.id))
    while cur is not None:
        prev = records[cur.gate] if cur.gate is not None else None
        lo = prev.end if prev is not None else t0
        cls = cur.cmd.op_class or cur.cmd.kind.value
        out[cls] = out.get(cls, 0.0) + (cur.end - lo)
        cur = prev
    return out


def dma_pim_overlap(intervals: Sequence[Interval], same_channel: bool = False) -> float:
    """Total time off-chip DMAs run while a PIM macro runs (device-wide by default)."""
    dmas = [i for i in intervals if i.kind == "dma" and i.end > i.start]
    pims = [i for i in intervals if i.kind == "pim"]
    total = 0.0
    for d in dmas:
        for p in pims:
            if same_channel and not set(d.channels) & set(p.channels):
                continue
            lo, hi = max(d.start, p.start), min(d.end, p.end)
            if hi > lo:
                total += hi - lo
    return total


# ---------------------------------------------------------------------------
# energy


@dataclass(frozen=True)
class Energy:
    core_compute: float
    normal_mem: float
    pim_ops: float

    @property
    def total(self) -> float:
        return self.core_compute + self.normal_mem + self.pim_ops


_EVENT_KINDS = ("dram_reads", "dram_writes", "dram_activates", "pim_macs", "pim_activates",
                "pim_gb_writes", "pim_acc_reads", "pim_lut_activates", "mu_macs", "vu_ops")


def account_energy(events: dict[str, float], hw: HardwareConfig) -> Energy:
    """Fold event counts into (core, normal memory, PIM) dynamic energy in joules."""
    unknown = set(events) - set(_EVENT_KINDS)
    if unknown:
        raise ValueError(f"unknown energy event kind(s): {sorted(unknown)}")
    e = hw.energy
    g = events.get
    normal = g("dram_reads", 0) * e.e_dram_read + g("dram_writes", 0) * e.e_dram_write \
        + g("dram_activates", 0) * e.e_dram_activate
    # one all-bank MAC on a channel counts as one PIM column operation
    pim = g("pim_macs", 0) * e.e_pim_op + (g("pim_activates", 0) + g("pim_lut_activates", 0)) * e.e_dram_activate \
        + g("pim_gb_writes", 0) * e.e_dram_write + g("pim_acc_reads", 0) * e.e_dram_read
    core = g("mu_macs", 0) * e.e_mu_mac + g("vu_ops", 0) * e.e_vu_op
    return Energy(core, normal, pim)


def _event_dict(r: StageResult) -> dict[str, float]:
    d = {k: float(v) for k, v in asdict(r.events).items()}
    d["mu_macs"] = float(r.mu_macs)
    d["vu_ops"] = float(r.vu_ops)
    return d


# ---------------------------------------------------------------------------
# whole-run driver


@dataclass
class Metrics:
    """Additive quantities of a stage, so samples can be combined linearly."""

    time: float = 0.0
    breakdown: dict[str, float] = field(default_factory=dict)
    events: dict[str, float] = field(default_factory=dict)
    busy: dict[str, float] = field(default_factory=dict)
    noc_messages: float = 0.0
    noc_bytes: float = 0.0
    link_bytes: float = 0.0
    dma_pim_overlap: float = 0.0
    pim_macros: float = 0.0

    @classmethod
    def of(cls, r: StageResult) -> "Metrics":
        return cls(r.elapsed, dict(r.breakdown), _event_dict(r), dict(r.busy), r.noc_messages,
                   r.noc_bytes, r.link_bytes, dma_pim_overlap(r.intervals), r.pim_macros)

    def combine(self, other: "Metrics", a: float = 1.0, b: float = 1.0) -> "Metrics":
        def mix(x: dict, y: dict) -> dict:
            return {k: a * x.get(k, 0.0) + b * y.get(k, 0.0) for k in sorted(set(x) | set(y))}
        return Metrics(a * self.time + b * other.time, mix(self.breakdown, other.breakdown),
                       mix(self.events, other.events), mix(self.busy, other.busy),
                       a * self.noc_messages + b * other.noc_messages,
                       a * self.noc_bytes + b * other.noc_bytes,
                       a * self.link_bytes + b * other.link_bytes,
                       a * self.dma_pim_overlap + b * other.dma_pim_overlap,
                       a * self.pim_macros + b * other.pim_macros)


@dataclass
class RunOptions:
    attention: str | None = None
    naive: bool = False
    fc_mapping: str = "auto"
    exact: bool = False  # simulate every block and every generation step
    gen_samples: int = 6
    trace: bool = False


@dataclass
class SimReport:
    model: str
    mode: str
    input_tokens: int
    output_tokens: int
    n_devices: int
    total_ns: float
    stages: dict[str, float]
    per_token_ns: float
    breakdown: dict[str, dict[str, float]]
    utilization: dict[str, float]
    energy: dict[str, float]
    events: dict[str, float]
    counters: dict[str, float]
    mapping: dict[str, dict[str, str]]
    attention: dict[str, str]
    qkt_pim_efficiency: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"model {self.model}  mode {self.mode}  tokens ({self.input_tokens},{self.output_tokens})"
                 f"  devices {self.n_devices}",
                 f"{'total':<24}{self.total_ns / 1e6:>14.4f} ms"]
        for k, v in self.stages.items():
            lines.append(f"{k:<24}{v / 1e6:>14.4f} ms")
        lines.append(f"{'per generated token':<24}{self.per_token_ns / 1e6:>14.4f} ms")
        lines.append("breakdown (ms)")
        classes = sorted({k for b in self.breakdown.values() for k in b})
        lines.append(f"  {'class':<20}" + "".join(f"{s:>16}" for s in self.breakdown))
        for k in classes:
            lines.append(f"  {k:<20}" + "".join(f"{b.get(k, 0.0) / 1e6:>16.4f}" for b in self.breakdown.values()))
        lines.append("energy (mJ)")
        for k, v in self.energy.items():
            lines.append(f"  {k:<20}{v * 1e3:>16.4f}")
        lines.append("utilization")
        for k, v in self.utilization.items():
            lines.append(f"  {k:<20}{v:>16.3f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "class", "ns"])
        for s, b in self.breakdown.items():
            for k in sorted(b):
                w.writerow([s, k, f"{b[k]:.3f}"])
        return buf.getvalue()


def _block_counts(model: ModelConfig, exact: bool) -> tuple[int, ...]:
    if exact or model.num_blocks <= 3:
        return (model.num_blocks,)
    return (2, 3)


def _stage_metrics(model: ModelConfig, hw: HardwareConfig, stage: Stage, opts: RunOptions,
                   plan: AllocationPlan, n_devices: int, trace_sink: list | None) -> tuple[Metrics, StagePlan]:
    """Metrics of one stage over all decoder blocks, extrapolating from 2 and 3 blocks."""
    results = []
    sp = None
    for k in _block_counts(model, opts.exact):
        co = CompileOptions(attention=opts.attention, naive=opts.naive, blocks=k, n_devices=n_devices,
                            fc_mapping=opts.fc_mapping)
        sp = build_commands(model, hw, stage, co, plan)
        r = simulate_stage(sp, hw, 0.0, trace=opts.trace)
        if trace_sink is not None:
            trace_sink.append(r)
        results.append(Metrics.of(r))
    if len(results) == 1:
        return results[0], sp
    m2, m3 = results
    per_block = m3.combine(m2, 1.0, -1.0)
    extra = model.num_blocks - 3
    return m3.combine(per_block, 1.0, float(extra)), sp


def _sample_steps(total: int, samples: int, exact: bool) -> list[int]:
    if total <= 0:
        return []
    if exact or total <= samples:
        return list(range(1, total + 1))
    pts = {1 + round(i * (total - 1) / (samples - 1)) for i in range(samples)}
    return sorted(pts)


def _integrate(samples: dict[int, Metrics], total: int) -> Metrics:
    """Sum metrics over steps 1..total, interpolating linearly between samples."""
    xs = sorted(samples)
    acc = Metrics()
    for step in range(1, total + 1):
        if step in samples:
            acc = acc.combine(samples[step])
            continue
        hi = next(x for x in xs if x > step)
        lo = max(x for x in xs if x < step)
        w = (step - lo) / (hi - lo)
        acc = acc.combine(samples[lo].combine(samples[hi], 1 - w, w))
    return acc


def run(model: ModelConfig, hw: HardwareConfig, opts: RunOptions | None = None, n_devices: int = 1,
        check_capacity: bool = True, trace_sink: list | None = None) -> SimReport:
    """Simulate summarization once, then one generation step per further output token."""
    opts = opts or RunOptions()
    plan = plan_allocation(model, hw, n_devices=n_devices, check_capacity=check_capacity)
    summ, sp = _stage_metrics(model, hw, Stage.summarization(model), opts, plan, n_devices, trace_sink)
    mapping = {"summarization": sp.mapping}
    attention = {"summarization": sp.attention.variant.value}
    eff = sp.attention.qkt_pim_efficiency
    steps = model.output_tokens - 1 if model.family == "gpt" else 0
    sampled: dict[int, Metrics] = {}
    for k in _sample_steps(steps, opts.gen_samples, opts.exact):
        m, gp = _stage_metrics(model, hw, Stage.generation(model, k), opts, plan, n_devices, trace_sink)
        sampled[k] = m
        mapping["generation"] = gp.mapping
        attention["generation"] = gp.attention.variant.value
        eff = gp.attention.qkt_pim_efficiency
    gen = _integrate(sampled, steps) if steps else Metrics()
    total = summ.combine(gen)
    ev = dict(total.events)
    en = account_energy(ev, hw)
    span = total.time or 1.0
    util = {u: v / span / hw.num_cores for u, v in sorted(total.busy.items())}
    report = SimReport(
        model=model.name, mode=hw.memory_mode, input_tokens=model.input_tokens,
        output_tokens=model.output_tokens, n_devices=n_devices, total_ns=total.time,
        stages={"summarization": summ.time, "generation": gen.time},
        per_token_ns=gen.time / steps if steps else 0.0,
        breakdown={"summarization": summ.breakdown, "generation": gen.breakdown,
                   "total": total.breakdown},
        utilization=util,
        energy={"core_compute": en.core_compute, "normal_mem": en.normal_mem, "pim_ops": en.pim_ops,
                "total": en.total},
        events=ev,
        counters={"noc_messages": total.noc_messages, "noc_bytes": total.noc_bytes,
                  "link_bytes": total.link_bytes, "dma_pim_overlap_ns": total.dma_pim_overlap,
                  "pim_macros": total.pim_macros, "fragmentation_bytes": plan.fragmentation_bytes},
        mapping=mapping, attention=attention, qkt_pim_efficiency=eff)
    return report


def run_multi_device(model: ModelConfig, hw: HardwareConfig, n_devices: int,
                     opts: RunOptions | None = None, check_capacity: bool = True,
                     trace_sink: list | None = None) -> SimReport:
    """Head- and column-parallel execution over ``n_devices`` identical devices.

    Devices run the same sliced program, so one is simulated and energy is
    scaled by the device count; every SYNC pays the PCIe all-gather.
    """
    if n_devices < 1:
        raise ValueError("n_devices must be positive")
    rep = run(model, hw, opts, n_devices=n_devices, check_capacity=check_capacity, trace_sink=trace_sink)
    if n_devices > 1:
        rep.energy = {k: v * n_devices for k, v in rep.energy.items()}
        rep.events = {k: v * n_devices for k, v in rep.events.items()}
    return rep


def timeline_csv(result: StageResult) -> str:
    """Per-command busy intervals for Gantt rendering."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["start_ns", "end_ns", "core", "unit", "command", "kind", "op", "name"])
    for r in sorted(result.records.values(), key=lambda r: (r.start, r.cmd.id)):
        c = r.cmd
        w.writerow([f"{r.start:.3f}", f"{r.end:.3f}", c.core, c.unit, c.id, c.kind.value, c.op, c.name])
    return buf.getvalue()
