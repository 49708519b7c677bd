"""Channel model: bank state machines, per-bank PUs and the PIM memory controller.

All times here are integer tCK cycles. A :class:`ChannelState` owns its
banks, its global buffer and a command bus that issues at most one command
per cycle. Commands are placed at the earliest cycle that satisfies every
timing constraint (lazy bank timers), so issuing a long sequence costs one
Python step per command, not per cycle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .config import HardwareConfig
from .isa import BROADCAST, MemCommand, MemKind, MicroKind, MicroPimCommand

NEVER = -(10**15)


class BankPhase(str, Enum):
    IDLE = "idle"
    ROW_OPEN = "row_open"


@dataclass
class BankState:
    phase: BankPhase = BankPhase.IDLE
    open_row: int | None = None
    t_act: int = NEVER
    t_pre: int = NEVER
    t_col: int = NEVER  # last RD/WR/MAC issue
    t_wr: int = NEVER

    def state_at(self, cycle: int, tRCD: int, tRP: int) -> str:
        """Coarse state name at ``cycle`` (for reporting only)."""
        if self.phase is BankPhase.ROW_OPEN:
            return "activating" if cycle < self.t_act + tRCD else f"row_open({self.open_row})"
        return "precharging" if cycle < self.t_pre + tRP else "idle"


@dataclass
class TraceRecord:
    cycle: int
    channel: int
    bank: int | None  # None for all-bank commands
    kind: str
    row: int = 0
    column: int = 0

    def line(self) -> str:
        bank = "all" if self.bank is None else str(self.bank)
        return f"{self.cycle} {self.channel} {bank} {self.kind} {self.row} {self.column}"


@dataclass
class EnergyEvents:
    """Event counts; turned into joules by the engine's accountant."""

    dram_reads: int = 0  # column reads
    dram_writes: int = 0
    dram_activates: int = 0
    pim_macs: int = 0  # all-bank MAC bursts, one per channel
    pim_activates: int = 0  # bank activations on behalf of PIM
    pim_gb_writes: int = 0
    pim_acc_reads: int = 0  # per-bank accumulator drains
    pim_lut_activates: int = 0

    def add(self, other: "EnergyEvents", scale: float = 1) -> None:
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k) * scale)

    def scaled(self, k: float) -> "EnergyEvents":
        e = EnergyEvents()
        e.add(self, k)
        return e


class TimingViolation(AssertionError):
    pass


class ChannelState:
    def __init__(self, hw: HardwareConfig, channel: int, record: bool = False):
        t = hw.timing
        self.hw = hw
        self.channel = channel
        self.banks = [BankState() for _ in range(hw.banks_per_channel)]
        self.record = record
        self.trace: list[TraceRecord] = []
        self.events = EnergyEvents()
        self.bus: set[int] = set()
        self.bus_floor = 0  # cycles below this are considered used
        self.gb_tag: object = None
        self.gb_ready = NEVER
        self.gb_last_write = NEVER
        self.t_mac = NEVER  # last MAC_ALL_BANKS
        self.acc_free = NEVER
        self.func_done = NEVER
        self.pim_active_until = NEVER
        self.t_col_any = NEVER
        self.c = {
            "tRCDRD": t.cycles("tRCDRD"),
            "tRCDWR": t.cycles("tRCDWR"),
            "tRP": t.cycles("tRP"),
            "tRAS": t.cycles("tRAS"),
            "tWR": t.cycles("tWR"),
            "tCCD_S": t.cycles("tCCD_S"),
            "tCCD_L": t.cycles("tCCD_L"),
            "mac": t.pim_mac_cycles_per_column_burst,
            "gb": t.pim_gb_write_cycles,
            "func": t.pim_act_func_cycles,
        }

    # ---- command bus -------------------------------------------------

    def _slot(self, earliest: int) -> int:
        c = max(earliest, self.bus_floor)
        while c in self.bus:
            c += 1
        self.bus.add(c)
        if len(self.bus) > 4096:
            # slots far in the past can never be requested again
            horizon = max(self.bus) - 2048
            self.bus = {x for x in self.bus if x >= horizon}
            self.bus_floor = max(self.bus_floor, horizon)
        return c

    def _log(self, cycle: int, bank: int | None, kind: str, row: int = 0, column: int = 0) -> None:
        if self.record:
            self.trace.append(TraceRecord(cycle, self.channel, bank, kind, row, column))

    # ---- normal memory commands --------------------------------------

    def issue(self, cmd: MemCommand, earliest: int = 0) -> int:
        """Issue one DRAM command at the earliest legal cycle; return that cycle."""
        c = self.c
        b = self.banks[cmd.bank]
        if cmd.kind is MemKind.ACT:
            if b.phase is BankPhase.ROW_OPEN:
                raise TimingViolation(f"ACT to open bank {cmd.bank} on channel {self.channel}")
            t = self._slot(max(earliest, b.t_pre + c["tRP"]))
            b.phase, b.open_row, b.t_act = BankPhase.ROW_OPEN, cmd.row, t
            self.events.dram_activates += 1
        elif cmd.kind in (MemKind.RD, MemKind.WR):
            if b.phase is not BankPhase.ROW_OPEN or b.open_row != cmd.row:
                raise TimingViolation(f"{cmd.kind.value} to closed row {cmd.row} bank {cmd.bank}")
            rcd = c["tRCDRD"] if cmd.kind is MemKind.RD else c["tRCDWR"]
            t = self._slot(max(earliest, b.t_act + rcd, b.t_col + c["tCCD_L"], self.t_col_any + c["tCCD_S"]))
            b.t_col = t
            self.t_col_any = t
            if cmd.kind is MemKind.WR:
                b.t_wr = t
                self.events.dram_writes += 1
            else:
                self.events.dram_reads += 1
        elif cmd.kind is MemKind.PRE:
            if b.phase is not BankPhase.ROW_OPEN:
                return earliest
            t = self._slot(max(earliest, b.t_act + c["tRAS"], b.t_col + c["tCCD_L"], b.t_wr + c["tWR"]))
            b.phase, b.open_row, b.t_pre = BankPhase.IDLE, None, t
        else:  # pragma: no cover - enum is closed
            raise ValueError(cmd.kind)
        self._log(t, cmd.bank, cmd.kind.value, cmd.row, cmd.column)
        return t

    def stream(self, units: Sequence[tuple[int, int, int]], write: bool, start: int) -> int:
        """Read or write whole bank-row units ``(bank, row, n_columns)``.

        Rows are opened ahead of the column stream when their bank is free and
        closed right after their last access. Returns the cycle at which the
        transfer's data and precharges are complete.
        """
        kind = MemKind.WR if write else MemKind.RD
        end = start
        for bank, row, ncols in units:
            b = self.banks[bank]
            if b.phase is BankPhase.ROW_OPEN and b.open_row != row:
                self.issue(MemCommand(MemKind.PRE, self.channel, bank, b.open_row), start)
            if b.phase is not BankPhase.ROW_OPEN:
                self.issue(MemCommand(MemKind.ACT, self.channel, bank, row), start)
            for col in range(ncols):
                t = self.issue(MemCommand(kind, self.channel, bank, row, col), start)
            end = max(end, t + self.c["tCCD_S"])
            p = self.issue(MemCommand(MemKind.PRE, self.channel, bank, row), start)
            end = max(end, p + self.c["tRP"])
        return end

    def precharge_all(self, earliest: int) -> int:
        """Close every open row (needed before an all-bank activation)."""
        t = earliest
        for i, b in enumerate(self.banks):
            if b.phase is BankPhase.ROW_OPEN:
                t = max(t, self.issue(MemCommand(MemKind.PRE, self.channel, i, b.open_row), earliest))
        return t

    # ---- PIM micro commands ------------------------------------------

    def issue_micro(self, m: MicroPimCommand, earliest: int = 0, gb_tag: object = None) -> int:
        c = self.c
        banks = self.banks
        k = m.kind
        if k is MicroKind.WRITE_GB:
            # the buffer may not change under an in-flight MAC stream
            floor = self.gb_last_write + c["gb"]
            if gb_tag != self.gb_tag:
                floor = max(floor, self.t_mac + c["mac"])
            t = self._slot(max(earliest, floor))
            self.gb_last_write = t
            self.gb_ready = t + c["gb"]
            self.gb_tag = gb_tag
            self.events.pim_gb_writes += 1
            self._log(t, None, k.value, m.row, m.segment)
        elif k is MicroKind.ACT_ALL_BANKS:
            if any(b.phase is BankPhase.ROW_OPEN for b in banks):
                self.precharge_all(earliest)
            t = self._slot(max([earliest] + [b.t_pre + c["tRP"] for b in banks]))
            for b in banks:
                b.phase, b.open_row, b.t_act = BankPhase.ROW_OPEN, m.row, t
            self.events.pim_activates += len(banks)
            self._log(t, None, k.value, m.row)
        elif k is MicroKind.MAC_ALL_BANKS:
            for i, b in enumerate(banks):
                if b.phase is not BankPhase.ROW_OPEN or b.open_row != m.row:
                    raise TimingViolation(f"MAC on channel {self.channel} bank {i}: row {m.row} not open")
            if gb_tag is not None and gb_tag != self.gb_tag:
                raise TimingViolation(f"MAC on channel {self.channel}: global buffer holds {self.gb_tag}, need {gb_tag}")
            t = self._slot(max(earliest, banks[0].t_act + c["tRCDRD"], self.t_mac + c["mac"],
                               self.t_col_any + c["tCCD_S"], self.gb_ready, self.acc_free))
            for b in banks:
                b.t_col = t
            self.t_mac = t
            self.t_col_any = t
            self.events.pim_macs += 1
            self._log(t, None, k.value, m.row, m.column)
        elif k is MicroKind.ACT_FUNC:
            t = self._slot(max(earliest, self.t_mac + c["mac"]))
            self.func_done = t + c["func"]
            self.events.pim_lut_activates += len(banks)
            self._log(t, None, k.value, m.row)
        elif k is MicroKind.READ_ACC:
            t = self._slot(max(earliest, self.t_mac + c["mac"], self.func_done))
            # one column-read equivalent per bank, pipelined across banks
            self.acc_free = t + len(banks) * c["tCCD_S"]
            self.events.pim_acc_reads += len(banks)
            self._log(t, None, k.value, m.row)
        elif k is MicroKind.PRECHARGE_ALL:
            t = self._slot(max([earliest] + [max(b.t_act + c["tRAS"], b.t_col + c["tCCD_L"], b.t_wr + c["tWR"])
                                             for b in banks]))
            for b in banks:
                b.phase, b.open_row, b.t_pre = BankPhase.IDLE, None, t
            self._log(t, None, k.value, m.row)
        else:  # pragma: no cover
            raise ValueError(k)
        return t

    def pim_done(self) -> int:
        """Cycle at which the last PIM operation has fully drained."""
        return max(self.acc_free, self.func_done, max(b.t_pre for b in self.banks) + self.c["tRP"], self.t_mac + self.c["mac"])


# ---------------------------------------------------------------------------


def run_micro_sequence(channels: dict[int, ChannelState], seq: Iterable[MicroPimCommand],
                       targets: Sequence[int], start: int) -> int:
    """Drive a decoded macro through its channel controllers.

    Broadcast commands are replayed on every target channel; each controller
    issues at its own earliest legal cycle. Returns the completion cycle of
    the slowest channel (including the final precharge recovery).
    """
    macro_key = object()  # buffer contents never carry over between macros
    for m in seq:
        tag = (macro_key, m.gb_key) if m.kind in (MicroKind.WRITE_GB, MicroKind.MAC_ALL_BANKS) else None
        chans = targets if m.channel == BROADCAST else (m.channel,)
        for ch in chans:
            channels[ch].issue_micro(m, start, tag)
    return max(channels[ch].pim_done() for ch in targets)


def pu_mac(ch: ChannelState, row: int, column_burst: int, earliest: int = 0) -> int:
    """One all-bank MAC burst: every PU consumes one column of its bank."""
    return ch.issue_micro(MicroPimCommand(MicroKind.MAC_ALL_BANKS, ch.channel, row, column_burst), earliest)


def flops_per_burst(hw: HardwareConfig) -> int:
    return hw.banks_per_channel * hw.elems_per_column * 2


def pu_activation(ch: ChannelState, kind: str = "gelu", enabled: bool = True, earliest: int = 0) -> int:
    """Charge the LUT-based activation; returns cycles spent (0 when disabled)."""
    if not enabled:
        return 0
    if kind != "gelu":
        raise ValueError(f"unsupported PIM activation {kind!r}")
    t = ch.issue_micro(MicroPimCommand(MicroKind.ACT_FUNC, ch.channel), earliest)
    return ch.func_done - t


def stream_cycles(hw: HardwareConfig, n_columns: int, write: bool = False) -> int:
    """Closed-form duration of a bank-interleaved stream on one idle channel.

    Matches :meth:`ChannelState.stream` when consecutive rows sit in
    different banks (the linear layout guarantees this within a channel).
    """
    if n_columns <= 0:
        return 0
    t = hw.timing
    rcd = t.cycles("tRCDWR" if write else "tRCDRD")
    ccd = t.cycles("tCCD_S")
    last = rcd + (n_columns - 1) * ccd
    pre = last + ccd
    if write:
        pre = max(pre, last + t.cycles("tWR"))
    return max(last + ccd, pre + t.cycles("tRP"))


# ---------------------------------------------------------------------------
# trace format


def dump_trace(records: Iterable[TraceRecord]) -> str:
    rows = sorted(records, key=lambda r: (r.cycle, r.channel, -1 if r.bank is None else r.bank))
    return "".join(r.line() + "\n" for r in rows)


def parse_trace(text: str) -> list[TraceRecord]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"trace line {lineno}: expected 6 fields, got {len(parts)}")
        cyc, ch, bank, kind, row, col = parts
        out.append(TraceRecord(int(cyc), int(ch), None if bank == "all" else int(bank), kind, int(row), int(col)))
    return out


@dataclass
class Violation:
    record: TraceRecord
    rule: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.record.line()}"


def validate_trace(records: Sequence[TraceRecord], hw: HardwareConfig) -> list[Violation]:
    """Check every command in a trace against the DRAM/PIM timing rules.

    Independent of the controller: it replays the trace in cycle order and
    tracks only what each rule needs.
    """
    t = hw.timing
    cyc = {n: t.cycles(n) for n in ("tRCDRD", "tRCDWR", "tRP", "tRAS", "tWR", "tCCD_S", "tCCD_L")}
    mac = t.pim_mac_cycles_per_column_burst
    nb = hw.banks_per_channel
    viol: list[Violation] = []
    state: dict[tuple[int, int], dict] = {}
    bus: dict[int, set[int]] = {}
    last_col: dict[int, int] = {}
    last_mac: dict[int, int] = {}

    def bank(ch: int, b: int) -> dict:
        return state.setdefault((ch, b), {"open": None, "act": NEVER, "pre": NEVER, "col": NEVER, "wr": NEVER})

    order = sorted(records, key=lambda r: (r.cycle, r.channel))
    for r in order:
        used = bus.setdefault(r.channel, set())
        if r.cycle in used:
            viol.append(Violation(r, "tCK: two commands in one cycle"))
        used.add(r.cycle)
        targets = range(nb) if r.bank is None else (r.bank,)
        kind = r.kind
        if kind in ("ACT", "ACT_ALL_BANKS"):
            for b in targets:
                s = bank(r.channel, b)
                if s["open"] is not None:
                    viol.append(Violation(r, f"ACT to open bank {b}"))
                if r.cycle < s["pre"] + cyc["tRP"]:
                    viol.append(Violation(r, f"tRP on bank {b}"))
                s["open"], s["act"] = r.row, r.cycle
        elif kind in ("RD", "WR", "MAC_ALL_BANKS"):
            rcd = cyc["tRCDWR"] if kind == "WR" else cyc["tRCDRD"]
            if r.cycle < last_col.get(r.channel, NEVER) + cyc["tCCD_S"]:
                viol.append(Violation(r, "tCCD_S"))
            if kind == "MAC_ALL_BANKS" and r.cycle < last_mac.get(r.channel, NEVER) + mac:
                viol.append(Violation(r, "MAC burst spacing"))
            for b in targets:
                s = bank(r.channel, b)
                if s["open"] != r.row:
                    viol.append(Violation(r, f"{kind} to closed row on bank {b}"))
                if r.cycle < s["act"] + rcd:
                    viol.append(Violation(r, f"{'tRCDWR' if kind == 'WR' else 'tRCDRD'} on bank {b}"))
                if r.cycle < s["col"] + cyc["tCCD_L"]:
                    viol.append(Violation(r, f"tCCD_L on bank {b}"))
                s["col"] = r.cycle
                if kind == "WR":
                    s["wr"] = r.cycle
            last_col[r.channel] = r.cycle
            if kind == "MAC_ALL_BANKS":
                last_mac[r.channel] = r.cycle
        elif kind in ("PRE", "PRECHARGE_ALL"):
            for b in targets:
                s = bank(r.channel, b)
                if s["open"] is None:
                    continue
                if r.cycle < s["act"] + cyc["tRAS"]:
                    viol.append(Violation(r, f"tRAS on bank {b}"))
                if r.cycle < s["wr"] + cyc["tWR"]:
                    viol.append(Violation(r, f"tWR on bank {b}"))
                s["open"], s["pre"] = None, r.cycle
        elif kind in ("WRITE_GB", "READ_ACC", "ACT_FUNC"):
            pass
        else:
            viol.append(Violation(r, f"unknown command {kind}"))
    return viol
