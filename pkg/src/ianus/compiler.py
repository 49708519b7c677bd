"""Lower a transformer workload into per-core command streams.

Mapping follows the intra-layer / head-parallel split: each core owns a
group of attention heads and a column slice of every other FC. The FC
placement between the matrix unit and PIM comes from :func:`adaptive_map_fc`
and the attention block follows one of the templates chosen by
:func:`schedule_attention`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

from .config import HardwareConfig, ModelConfig
from .isa import Command, Kind, OperandDesc, topo_validate
from .memmap import (AddressMapper, AllocationPlan, TileMap, head_channels, heads_of_core, kv_segments,
                     plan_allocation, tile_weight_matrix)
from .npu import macro_cycles, mu_cycles, mu_tiles, vu_cycles


class CompileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# stages


@dataclass(frozen=True)
class Stage:
    kind: str  # "summarization" or "generation"
    n_tokens: int
    context: int  # keys visible once this stage's tokens are appended
    step: int = 0

    @classmethod
    def summarization(cls, model: ModelConfig) -> "Stage":
        return cls("summarization", model.input_tokens, model.input_tokens, 0)

    @classmethod
    def generation(cls, model: ModelConfig, step: int) -> "Stage":
        if step < 1:
            raise ValueError("generation steps are numbered from 1")
        return cls("generation", 1, model.input_tokens + step, step)

    @property
    def label(self) -> str:
        return self.kind if self.kind == "summarization" else f"generation({self.step})"


class Variant(str, Enum):
    SUMMARIZE_MU = "summarize_mu"
    GEN_PIM_QKT = "gen_pim_qkt"
    GEN_MU_QKT = "gen_mu_qkt"


@dataclass(frozen=True)
class AttentionSchedule:
    variant: Variant
    template: tuple[str, ...]  # per-head command order
    qkt_pim_efficiency: float | None = None
    stats: dict = field(default_factory=dict, compare=False)


_TEMPLATES = {
    Variant.SUMMARIZE_MU: ("load_wk", "k_gen", "load_wv", "v_gen", "transpose_k", "load_wq", "q_gen",
                           "qkt", "softmax", "move_v", "sv", "store_k", "store_v"),
    Variant.GEN_MU_QKT: ("k_gen", "q_gen", "concat_k", "transpose_k", "v_gen", "qkt", "softmax",
                         "store_k", "store_v", "load_vcat", "prefetch_k_next", "sv"),
    Variant.GEN_PIM_QKT: ("k_gen", "q_gen", "v_gen", "store_k", "store_v", "qkt_pim", "softmax", "sv_pim"),
}


def schedule_attention(stage: Stage, model: ModelConfig, hw: HardwareConfig,
                       variant: str | Variant | None = None) -> AttentionSchedule:
    """Pick the attention template for a stage.

    Summarization always runs on the matrix unit. Generation defaults to
    the matrix-unit QK^T schedule; the PIM QK^T schedule stays selectable.
    """
    if stage.kind == "summarization":
        v = Variant.SUMMARIZE_MU
    else:
        v = Variant(variant) if variant else Variant.GEN_MU_QKT
        if v is Variant.SUMMARIZE_MU:
            raise CompileError("summarize_mu applies to the summarization stage only")
    eff = None
    stats = {"tiled_qkt": model.head_dim > hw.mu_cols}
    if v is Variant.GEN_PIM_QKT:
        # one head's key slice fills head_dim of the row's columns
        eff = min(1.0, model.head_dim / hw.elems_per_row)
        stats["qkt_pim_efficiency"] = eff
    return AttentionSchedule(v, _TEMPLATES[v], eff, stats)


# ---------------------------------------------------------------------------
# analytical model


def pipe(a: float, b: float, tiles: int) -> float:
    """Double-buffered overlap of two stages split into ``tiles`` equal pieces."""
    if tiles <= 0:
        return 0.0
    at, bt = a / tiles, b / tiles
    return max(at, bt) * (tiles - 1) + at + bt


@dataclass
class AnalyticalModel:
    """Closed-form unit latencies (ns) used for FC placement."""

    hw: HardwareConfig
    share: int = 1  # cores competing for the off-chip bandwidth
    weight_channels: int | None = None  # channels weights stream from
    pim_sharers: int | None = None  # cores issuing macros on the same channels; None derives it

    def mu_fc(self, n: int, rows: int, cols: int) -> float:
        return mu_cycles(n, cols, rows, self.hw) * self.hw.npu_cycle_ns

    def dma_chunks(self, nbytes: int) -> int:
        return max(1, math.ceil(nbytes / self.hw.dma_chunk_bytes)) if nbytes > 0 else 0

    def dma_weight(self, nbytes: int) -> float:
        if nbytes <= 0:
            return 0.0
        nch = self.weight_channels or self.hw.num_channels
        bw = nch * self.hw.channel_bw / self.share  # bytes/s
        return nbytes / bw * 1e9 + self.dma_chunks(nbytes) * self.hw.dma_overhead_ns

    def pim(self, n: int, rows: int, cols: int, channels: int | None = None, op: str = "fc") -> float:
        if n <= 0:
            return 0.0
        npim = len(self.hw.pim_channels()) or self.hw.num_channels
        nch = channels or npim
        tm = tile_weight_matrix(rows, cols, self.hw, channels=tuple(range(nch)))
        cyc, _ = macro_cycles(tm, op, 1, self.hw)
        sharers = self.pim_sharers
        if sharers is None:
            # macros on one channel set serialize across the cores that share it
            sharers = max(1, round(self.hw.num_cores * nch / npim))
        return n * cyc * self.hw.timing.tCK * sharers

    def vu(self, op: str, elements: int) -> float:
        return vu_cycles(op, elements, self.hw) * self.hw.npu_cycle_ns

    def mu_time(self, n: int, rows: int, cols: int, t_prefetch: float = 0.0) -> float:
        nbytes = rows * cols * self.hw.dtype_bytes
        w = self.dma_weight(nbytes)
        return pipe(w, self.mu_fc(n, rows, cols), self.dma_chunks(nbytes)) - t_prefetch


def estimate_unit_time(unit: str, n: int, shape, hw: HardwareConfig) -> float:
    """Stand-alone estimator (ns) for one unit on an otherwise idle device.

    ``shape`` is ``(rows, cols)`` for MU_FC / DMA_weight / PIM, and an
    element count (or ``(op, elements)``) for VU.
    """
    am = AnalyticalModel(hw, pim_sharers=1)
    if unit == "MU_FC":
        rows, cols = shape
        return am.mu_fc(n, rows, cols)
    if unit == "DMA_weight":
        rows, cols = shape
        return am.dma_weight(rows * cols * hw.dtype_bytes)
    if unit == "PIM":
        rows, cols = shape
        return am.pim(n, rows, cols)
    if unit == "VU":
        op, elems = shape if isinstance(shape, tuple) else ("residual", shape)
        return am.vu(op, elems)
    raise ValueError(f"unknown unit {unit!r}")


def adaptive_map_fc(cmds: Sequence[Command], n: int, hw: HardwareConfig,
                    model: AnalyticalModel | None = None) -> list[Command]:
    """Rewrite MU_FC commands to PIM_MACRO where PIM is strictly faster.

    Each command's own ``operand.n_tokens`` overrides ``n`` when set, so a
    stream may mix the stage's tokens with single-token heads.
    """
    am = model or AnalyticalModel(hw, share=hw.num_cores)
    out: list[Command] = []
    prev: Command | None = None
    for c in cmds:
        if c.kind is Kind.MU_FC and c.op != "npu_only" and c.operand.weight_rows:
            o = c.operand
            tok = o.n_tokens or n
            t_pre = am.vu(prev.op, prev.operand.elements) if prev is not None and prev.kind is Kind.VU else 0.0
            mu_t = am.mu_time(tok, o.weight_rows, o.weight_cols, t_pre)
            nch = len(o.channels) if o.channels else None
            pim_t = am.pim(tok, o.weight_rows, o.weight_cols, nch)
            if pim_t < mu_t:
                c = replace(c, kind=Kind.PIM_MACRO, op="fc", deps=set(c.deps))
        out.append(c)
        prev = c
    return out


# ---------------------------------------------------------------------------
# command building


@dataclass
class StagePlan:
    stage: Stage
    commands: list[Command]
    per_core: dict[int, list[Command]]
    syncs: list[int]
    blocks: int
    attention: AttentionSchedule
    mapping: dict[str, str]  # FC class -> "MU" / "PIM" / "mixed"
    n_devices: int = 1

    def by_id(self) -> dict[int, Command]:
        return {c.id: c for c in self.commands}

    def count(self, kind: Kind, op: str | None = None) -> int:
        return sum(1 for c in self.commands if c.kind is kind and (op is None or c.op == op))

    def emit_plan(self) -> str:
        head = f"# stage={self.stage.label} n={self.stage.n_tokens} context={self.stage.context} " \
               f"blocks={self.blocks} attention={self.attention.variant.value}"
        return "\n".join([head] + [c.describe() for c in self.commands]) + "\n"


@dataclass(frozen=True)
class CompileOptions:
    attention: str | None = None  # generation template override
    naive: bool = False  # serialize each core's stream, PIM QK^T
    blocks: int | None = None  # compile only the first k decoder blocks
    n_devices: int = 1
    fc_mapping: str = "auto"  # "auto", "mu" or "pim"


class _Builder:
    def __init__(self, model: ModelConfig, hw: HardwareConfig, stage: Stage, plan: AllocationPlan,
                 opts: CompileOptions):
        self.m, self.hw, self.st, self.plan, self.opts = model, hw, stage, plan, opts
        self.cmds: list[Command] = []
        self.core_last: dict[int, int | None] = {}
        self.dt = model.dtype_bytes
        self.mapper = AddressMapper(hw, plan.plain_channels) if plan.plain_channels else None
        self.qkv_on_pim = False

    # -- emission ----------------------------------------------------------
    def emit(self, kind: Kind, op: str, core: int, deps: Iterable[int | None], op_class: str,
             block: int = -1, name: str = "", operand: OperandDesc | None = None,
             tiles: TileMap | None = None, sync_bytes: int = 0) -> int:
        cid = len(self.cmds)
        dset = {d for d in deps if d is not None}
        if self.opts.naive and core >= 0 and self.core_last.get(core) is not None:
            dset.add(self.core_last[core])
        self.cmds.append(Command(cid, kind, op, core, dset, operand or OperandDesc(), op_class,
                                 block, tiles, name, sync_bytes))
        if core >= 0:
            self.core_last[core] = cid
        return cid

    # -- operand helpers ---------------------------------------------------
    def _linear(self, start: int, nbytes: int, n_tokens: int = 0, **kw) -> OperandDesc:
        per, acts = self.mapper.spread(start, nbytes)
        chans = tuple(sorted(c for c, b in per.items() if b))
        return OperandDesc(n_tokens=n_tokens, nbytes=nbytes, channels=chans,
                           bytes_per_channel=tuple(per[c] for c in chans),
                           activations=sum(acts.values()), in_addr=start,
                           region=("linear", start, nbytes), **kw)

    def _weight_slice(self, name: str, r0: int, r1: int) -> OperandDesc:
        """DMA operand streaming weight rows ``[r0, r1)`` of an FC."""
        p = self.plan[name]
        tm = p.tile_map
        cols = tm.cols if tm is not None else None
        if p.plain_start is not None:
            cols = cols or p.nbytes // self.dt // max(1, self._fc_rows(name))
            return self._linear(p.plain_start + r0 * cols * self.dt, (r1 - r0) * cols * self.dt, matrix=name)
        per = tm.row_bytes_per_channel(r0, r1, self.dt)
        chans = tuple(sorted(c for c, b in per.items() if b))
        return OperandDesc(nbytes=(r1 - r0) * tm.cols * self.dt, channels=chans,
                           bytes_per_channel=tuple(per[c] for c in chans),
                           activations=tm.activations(r0, r1), matrix=name, region=("tiled", tm, r0, r1))

    def _fc_rows(self, name: str) -> int:
        return self.fc_shapes[name][0]

    def kv(self, block: int, head: int, which: int, p0: int, p1: int, **kw) -> OperandDesc:
        """DMA operand for positions ``[p0, p1)`` of a head's K (0) or V (1) cache."""
        segs = kv_segments(self.plan, self.m, self.hw, block, head, which, p0, p1, self.opts.n_devices)
        per: dict[int, int] = {}
        acts = 0
        for start, nbytes in segs:
            by, a = self.mapper.spread(start, nbytes)
            for ch, v in by.items():
                per[ch] = per.get(ch, 0) + v
            acts += sum(a.values())
        chans = tuple(sorted(c for c, v in per.items() if v))
        return OperandDesc(nbytes=sum(n for _, n in segs), channels=chans,
                           bytes_per_channel=tuple(per[c] for c in chans), activations=acts,
                           in_addr=segs[0][0] if segs else 0, region=("segments", tuple(segs)), **kw)

    # -- logical FCs -------------------------------------------------------
    def fc(self, name: str, core: int, deps, op_class: str, block: int, n: int, gelu: bool = False) -> int:
        rows, cols = self.fc_shapes[name]
        p = self.plan[name]
        chans = p.tile_map.channels if p.tile_map is not None else ()
        op = "npu_only" if p.tile_map is None else ("gelu" if gelu else "")
        return self.emit(Kind.MU_FC, op, core, deps, op_class, block, name,
                         OperandDesc(n_tokens=n, weight_rows=rows, weight_cols=cols, matrix=name,
                                     channels=chans, weight_bytes=rows * cols * self.dt),
                         tiles=p.tile_map)

    def vu(self, op: str, core: int, deps, op_class: str, block: int, elements: int, name: str = "") -> int:
        return self.emit(Kind.VU, op, core, deps, op_class, block, name, OperandDesc(elements=elements))

    # -- stage -------------------------------------------------------------
    def build(self) -> None:
        m, hw, st = self.m, self.hw, self.st
        nd = self.opts.n_devices
        self.fc_shapes = {}
        from .memmap import fc_weights
        for s in fc_weights(m, hw, nd):
            self.fc_shapes[s.name] = (s.rows, s.cols)
        n, d = st.n_tokens, m.embedding_dim
        self.attn = schedule_attention(st, m, hw, "gen_pim_qkt" if self.opts.naive and st.kind == "generation"
                                       else self.opts.attention)
        if self.attn.variant is Variant.GEN_PIM_QKT and not hw.pim_channels():
            raise CompileError("gen_pim_qkt needs PIM channels; the plain memory mode has none")
        nblocks = m.num_blocks if self.opts.blocks is None else min(self.opts.blocks, m.num_blocks)
        self.nblocks = nblocks
        self.syncs: list[int] = []

        pos = self.plan["pos_embedding"]
        x = {}
        for c in range(hw.num_cores):
            x[c] = self.emit(Kind.DMA, "load", c, [], "embedding", -1, "embed",
                             self._linear(pos.plain_start + (st.context - n) * d * self.dt, n * d * self.dt, n))
        for b in range(nblocks):
            x = self.block(b, x)
        self.head(x)

    def block(self, b: int, x: dict[int, int]) -> dict[int, int]:
        m, hw, st = self.m, self.hw, self.st
        n, d = st.n_tokens, m.embedding_dim
        nd = self.opts.n_devices
        ffn = m.ffn_dim
        start = len(self.cmds)

        def sync(label: str, nbytes: int) -> int:
            deps = set(range(start_sync[0], len(self.cmds)))
            sid = self.emit(Kind.SYNC, "sync", -1, deps, "sync", b, label, sync_bytes=nbytes)
            self.syncs.append(sid)
            start_sync[0] = len(self.cmds)
            return sid

        start_sync = [start]
        attn_out = {}
        if st.kind == "generation":
            lns = {c: self.vu("layernorm", c, [x[c]], "layernorm", b, n * d, "ln1") for c in range(hw.num_cores)}
            attn_out = self.attn_generate(b, lns)
        for c in range(hw.num_cores if st.kind == "summarization" else 0):
            ln = self.vu("layernorm", c, [x[c]], "layernorm", b, n * d, "ln1")
            if st.kind == "summarization":
                if m.family == "gpt":
                    # causal mask bitmap, one bit per score
                    mask = self.emit(Kind.DMA, "load", c, [], "attention", b, "mask",
                                     self._linear(self.plan["pos_embedding"].plain_start,
                                                  max(32, n * st.context // 8)))
                else:
                    mask = None
                attn_out[c] = self.attn_summarize(b, c, ln, mask)
        s1 = sync("attention", n * d * self.dt // nd * nd)

        res = {}
        for c in range(hw.num_cores):
            pj = self.fc(f"b{b}.proj.c{c}", c, [s1], "fc_proj", b, n)
            rows = self.fc_shapes[f"b{b}.proj.c{c}"][0]
            res[c] = self.vu("residual", c, [pj], "residual", b, n * rows, "res1")
        s2 = sync("residual1", n * d * self.dt)

        act = {}
        for c in range(hw.num_cores):
            ln = self.vu("layernorm", c, [s2], "layernorm", b, n * d, "ln2")
            name = f"b{b}.ffn1.c{c}"
            f1 = self.fc(name, c, [ln], "ffn", b, n, gelu=True)
            act[c] = self.vu("gelu", c, [f1], "ffn", b, n * self.fc_shapes[name][0], "gelu")
        s3 = sync("gelu", n * ffn * self.dt // nd)

        out = {}
        for c in range(hw.num_cores):
            name = f"b{b}.ffn2.c{c}"
            f2 = self.fc(name, c, [s3], "ffn", b, n)
            out[c] = self.vu("residual", c, [f2], "residual", b, n * self.fc_shapes[name][0], "res2")
        s4 = sync("residual2", n * d * self.dt)
        return dict.fromkeys(range(hw.num_cores), s4)

    # -- attention templates ----------------------------------------------
    def _heads(self, c: int) -> range:
        return heads_of_core(self.m, self.hw, c, self.opts.n_devices)

    def attn_summarize(self, b: int, c: int, ln: int, mask: int | None) -> list[int]:
        m, st = self.m, self.st
        n, hd, L = st.n_tokens, m.head_dim, st.context
        done = []
        for h in self._heads(c):
            kg = self.fc(f"b{b}.k.h{h}", c, [ln], "fc_qkv", b, n)
            vg = self.fc(f"b{b}.v.h{h}", c, [ln], "fc_qkv", b, n)
            # keys take priority on the transpose path
            xk = self.emit(Kind.DMA, "onchip_transpose", c, [kg], "attention", b, "transpose_k",
                           OperandDesc(nbytes=L * hd * self.dt, head_index=h))
            qg = self.fc(f"b{b}.q.h{h}", c, [ln], "fc_qkv", b, n)
            # scaling by 1/sqrt(d_head) rides the MU output stage
            qk = self.emit(Kind.MU_ATTN, "qkt", c, [qg, xk], "attention", b, "qkt",
                           OperandDesc(n_tokens=n, weight_rows=L, weight_cols=hd, head_index=h))
            sm = self.vu("softmax_masked", c, [qk, mask], "attention", b, n * L, "softmax")
            mv = self.emit(Kind.DMA, "onchip_transpose", c, [vg], "attention", b, "move_v",
                           OperandDesc(nbytes=L * hd * self.dt, head_index=h))
            sv = self.emit(Kind.MU_ATTN, "sv", c, [sm, mv], "attention", b, "sv",
                           OperandDesc(n_tokens=n, weight_rows=hd, weight_cols=L, head_index=h))
            done.append(sv)
            if m.family == "gpt":
                for which, src in ((0, kg), (1, vg)):
                    self.emit(Kind.DMA, "store", c, [src], "attention", b, "store_kv",
                              self.kv(b, h, which, 0, n, n_tokens=n, head_index=h))
        return done

    def gangs(self) -> list[list[int]]:
        """Groups of cores whose heads sit on distinct PIM chips.

        The PCU runs one head slot of every core in a gang as a single macro
        (distinct rows per channel, so unicast).
        """
        by_chip: dict[tuple, list[int]] = {}
        for c in range(self.hw.num_cores):
            by_chip.setdefault(head_channels(self.hw, c), []).append(c)
        depth = max(len(v) for v in by_chip.values())
        return [[v[g] for v in by_chip.values() if g < len(v)] for g in range(depth)]

    def _gang_tiles(self, rows: int, cols: int, cores: list[int], mid: str, base_row: int = 0) -> TileMap:
        chans = tuple(ch for c in cores for ch in head_channels(self.hw, c))
        tm = tile_weight_matrix(rows * len(cores), cols, self.hw, matrix_id=mid, channels=chans,
                                base_row=base_row)
        return replace(tm, broadcast=False)

    def _qkv(self, b: int, w: str, slot: int, heads: dict[int, list[int]], gang: list[int],
             deps: Iterable[int]) -> int:
        """Head-parallel PIM FC for one head slot of every core in ``gang``."""
        m = self.m
        names = [f"b{b}.{w}.h{heads[c][slot]}" for c in gang]
        tm = self._gang_tiles(m.head_dim, m.embedding_dim, gang, "+".join(names),
                              max(self.plan[n].tile_map.base_row for n in names))
        return self.emit(Kind.PIM_MACRO, "fc", gang[0], deps, "fc_qkv", b, names[0],
                         OperandDesc(n_tokens=1, weight_rows=m.head_dim * len(gang), weight_cols=m.embedding_dim,
                                     head_index=heads[gang[0]][slot], channels=tm.channels, matrix=tm.matrix_id),
                         tiles=tm)

    def attn_generate(self, b: int, lns: dict[int, int]) -> dict[int, list[int]]:
        m, st, hw = self.m, self.st, self.hw
        hd, L = m.head_dim, st.context
        Lp = L - 1
        kvb = hd * self.dt
        cores = range(hw.num_cores)
        heads = {c: list(self._heads(c)) for c in cores}
        nslots = len(heads[0])
        done: dict[int, list[int]] = {c: [] for c in cores}
        ganged = self.qkv_on_pim

        def gen(w: str, slot: int, deps_of) -> dict[int, int]:
            if not ganged:
                return {c: self.fc(f"b{b}.{w}.h{heads[c][slot]}", c, deps_of(c), "fc_qkv", b, 1) for c in cores}
            out = {}
            for g in self.gangs():
                mid = self._qkv(b, w, slot, heads, g, [d for c in g for d in deps_of(c)])
                out.update(dict.fromkeys(g, mid))
            return out

        if self.attn.variant is Variant.GEN_PIM_QKT:
            base = max(self.plan.pim_rows_used.values(), default=0)
            row = self.hw.elems_per_row
            for i in range(nslots):
                kg = gen("k", i, lambda c: [lns[c]])
                qg = gen("q", i, lambda c: [lns[c]])
                vg = gen("v", i, lambda c: [lns[c]])
                sk, sv_ = {}, {}
                for c in cores:
                    h = heads[c][i]
                    # keys live one per DRAM row, so a row holds head_dim useful elements
                    kt = tile_weight_matrix(L, row, hw, matrix_id=f"kcache.b{b}.h{h}",
                                            channels=head_channels(hw, c), base_row=base)
                    sk[c] = self.emit(Kind.DMA, "store", c, [kg[c]], "attention", b, "store_k",
                                      self._pim_row_store(kt, L - 1, L, head=h, nbytes=kvb))
                    vt = tile_weight_matrix(hd, L, hw, matrix_id=f"vcache.b{b}.h{h}",
                                            channels=head_channels(hw, c), base_row=base)
                    # appending a token to V^T touches one element in each of head_dim rows
                    sv_[c] = self.emit(Kind.DMA, "store", c, [vg[c]], "attention", b, "store_v",
                                       self._pim_row_store(vt, 0, hd, head=h, nbytes=kvb))
                qk, smx = {}, {}
                for g in self.gangs():
                    kt = self._gang_tiles(L, row, g, f"kcache.b{b}.s{i}", base)
                    mid = self.emit(Kind.PIM_MACRO, "fc", g[0], [d for c in g for d in (qg[c], sk[c])],
                                    "attention", b, "qkt_pim",
                                    OperandDesc(n_tokens=1, weight_rows=L * len(g), weight_cols=row,
                                                head_index=heads[g[0]][i], channels=kt.channels,
                                                matrix=kt.matrix_id), tiles=kt)
                    qk.update(dict.fromkeys(g, mid))
                for c in cores:
                    smx[c] = self.vu("softmax_masked", c, [qk[c]], "attention", b, L, "softmax")
                for g in self.gangs():
                    vt = self._gang_tiles(hd, L, g, f"vcache.b{b}.s{i}", base + 1)
                    mid = self.emit(Kind.PIM_MACRO, "fc", g[0], [d for c in g for d in (smx[c], sv_[c])],
                                    "attention", b, "sv_pim",
                                    OperandDesc(n_tokens=1, weight_rows=hd * len(g), weight_cols=L,
                                                head_index=heads[g[0]][i], channels=vt.channels,
                                                matrix=vt.matrix_id), tiles=vt)
                    for c in g:
                        done[c].append(mid)
            return done

        def k_pre(c: int, slot: int, after: int) -> int:
            h = heads[c][slot]
            return self.emit(Kind.DMA, "prefetch", c, [after], "attention", b, "prefetch_k",
                             self.kv(b, h, 0, 0, max(Lp, 1), head_index=h))

        kp = {c: k_pre(c, 0, lns[c]) for c in cores}
        for i in range(nslots):
            # key generation of a head slot starts once its K_pre prefetch is done,
            # so PIM and off-chip traffic alternate instead of contending
            kg = gen("k", i, lambda c: [lns[c], kp[c]])
            qg = gen("q", i, lambda c: [lns[c], kp[c]])
            xk = {}
            for c in cores:
                # concatenate the new key on the VU rather than round-tripping memory
                # K_pre already sits in the scratchpad; only the new key is written
                cat = self.vu("concat", c, [kp[c], kg[c]], "attention", b, hd, "concat_k")
                xk[c] = self.emit(Kind.DMA, "onchip_transpose", c, [cat], "attention", b, "transpose_k",
                                  OperandDesc(nbytes=L * kvb, head_index=heads[c][i]))
            vg = gen("v", i, lambda c: [lns[c], kp[c]])
            for c in cores:
                h = heads[c][i]
                qk = self.emit(Kind.MU_ATTN, "qkt", c, [qg[c], xk[c]], "attention", b, "qkt",
                               OperandDesc(n_tokens=1, weight_rows=L, weight_cols=hd, head_index=h))
                sm = self.vu("softmax_masked", c, [qk], "attention", b, L, "softmax")
                # both stores wait for value generation so they run under the softmax
                self.emit(Kind.DMA, "store", c, [kg[c], vg[c]], "attention", b, "store_k",
                          self.kv(b, h, 0, Lp, L, n_tokens=1, head_index=h))
                stv = self.emit(Kind.DMA, "store", c, [vg[c]], "attention", b, "store_v",
                                self.kv(b, h, 1, Lp, L, n_tokens=1, head_index=h))
                vc = self.emit(Kind.DMA, "load", c, [stv], "attention", b, "load_vcat",
                               self.kv(b, h, 1, 0, L, head_index=h))
                if i + 1 < nslots:
                    # queued right behind V_cat so it streams during SV
                    kp[c] = k_pre(c, i + 1, stv)
                o = self.emit(Kind.MU_ATTN, "sv", c, [sm, vc], "attention", b, "sv",
                              OperandDesc(n_tokens=1, weight_rows=hd, weight_cols=L, head_index=h))
                done[c].append(o)
        return done

    def _pim_row_store(self, tm: TileMap, r0: int, r1: int, head: int, nbytes: int | None = None) -> OperandDesc:
        per = tm.row_bytes_per_channel(r0, r1, self.dt) if nbytes is None else \
            {ch: nbytes // len(tm.channels) for ch in tm.channels}
        chans = tuple(sorted(c for c, v in per.items() if v)) or tm.channels[:1]
        total = nbytes if nbytes is not None else (r1 - r0) * tm.cols * self.dt
        return OperandDesc(nbytes=total, channels=chans,
                           bytes_per_channel=tuple(max(per.get(c, 0), 32) for c in chans),
                           activations=len(chans), head_index=head, region=("tiled", tm, r0, r1))

    # -- output head ----------------------------------------------------
    def head(self, x: dict[int, int]) -> None:
        m, hw, st = self.m, self.hw, self.st
        d = m.embedding_dim
        start = len(self.cmds)
        if m.family == "gpt":
            for c in range(hw.num_cores):
                ln = self.vu("layernorm", c, [x[c]], "layernorm", m.num_blocks, d, "ln_f")
                # only the newest token's logits are needed
                self.fc(f"lm_head.c{c}", c, [ln], "lm_head", m.num_blocks, 1)
        else:
            for c in range(hw.num_cores):
                n = st.n_tokens
                w = self.emit(Kind.DMA, "load", c, [], "lm_head", m.num_blocks, "qa_weight",
                              self._linear(self.plan["qa_head"].plain_start, 2 * d * self.dt))
                self.emit(Kind.MU_FC, "npu_only", c, [x[c], w], "lm_head", m.num_blocks, "qa_head",
                          OperandDesc(n_tokens=n, weight_rows=2, weight_cols=d))
        self.emit(Kind.SYNC, "sync", -1, set(range(start, len(self.cmds))), "sync", m.num_blocks, "output",
                  sync_bytes=4 * hw.num_cores)

    # -- lowering --------------------------------------------------------
    def lower(self, cmds: list[Command]) -> list[Command]:
        """Expand logical FCs into weight-streaming DMAs + MU pieces or PIM macros."""
        hw, dt = self.hw, self.dt
        out: list[Command] = []
        remap: dict[int, int] = {}
        last_of_core: dict[int, int] = {}
        gelu_fused: set[int] = set()

        def add(c: Command) -> int:
            cid = len(out)
            deps = {remap[d] for d in c.deps if d in remap}
            if self.opts.naive and c.core >= 0 and c.core in last_of_core:
                deps.add(last_of_core[c.core])
            out.append(replace(c, id=cid, deps=deps))
            if c.core >= 0:
                last_of_core[c.core] = cid
            return cid

        for c in cmds:
            if c.kind is Kind.PIM_MACRO and c.tiles is not None and c.name.startswith(("qkt", "sv")):
                remap[c.id] = add(c)
            elif c.kind is Kind.PIM_MACRO:
                # GELU right after FFN1 runs in the PIM units' LUT
                op = "fc_gelu" if ".ffn1." in c.name else "fc"
                remap[c.id] = add(replace(c, op=op))
                if op == "fc_gelu":
                    gelu_fused.add(c.id)
            elif c.kind is Kind.VU and c.op == "gelu" and any(d in gelu_fused for d in c.deps):
                # GELU already applied inside PIM
                remap[c.id] = remap[next(d for d in c.deps if d in gelu_fused)]
            elif c.kind is Kind.MU_FC and c.operand.weight_rows and c.name in self.fc_shapes:
                rows, cols = self.fc_shapes[c.name]
                per_row = cols * dt
                piece = max(hw.mu_cols, (hw.dma_chunk_bytes // per_row) // hw.mu_cols * hw.mu_cols)
                window = max(1, hw.wm_capacity // max(1, piece * per_row) // 2)
                pieces = []
                for r0 in range(0, rows, piece):
                    r1 = min(rows, r0 + piece)
                    k = len(pieces)
                    wdeps = {pieces[k - window]} if k >= window else set()
                    ld = add(Command(-1, Kind.DMA, "load", c.core, set(), self._weight_slice(c.name, r0, r1),
                                     c.op_class, c.block, None, f"{c.name}.w{k}"))
                    out[ld].deps |= wdeps
                    mu = add(Command(-1, Kind.MU_FC, "fc", c.core, set(c.deps),
                                     OperandDesc(n_tokens=c.operand.n_tokens, weight_rows=r1 - r0,
                                                 weight_cols=cols, matrix=c.name,
                                                 weight_bytes=(r1 - r0) * per_row),
                                     c.op_class, c.block, None, f"{c.name}.p{k}"))
                    out[mu].deps.add(ld)
                    if pieces:
                        out[mu].deps.add(pieces[-1])
                    pieces.append(mu)
                remap[c.id] = pieces[-1]
            else:
                nc = c
                if c.kind is Kind.MU_FC:
                    nc = replace(c, op="fc")
                remap[c.id] = add(nc)
        return out


def _default_mapping_model(hw: HardwareConfig, plan: AllocationPlan) -> AnalyticalModel:
    chans = len(plan.plain_channels) if plan.plain_channels else hw.num_channels
    return AnalyticalModel(hw, share=hw.num_cores, weight_channels=chans)


def _qkv_on_pim(model: ModelConfig, hw: HardwareConfig, stage: Stage, opts: CompileOptions,
                plan: AllocationPlan) -> bool:
    """Whether per-head Q/K/V FCs of a generation step go to PIM.

    Decided once per stage, since head slots of several cores share one macro.
    """
    if stage.kind != "generation" or plan.mode == "plain" or opts.fc_mapping == "mu":
        return False
    if opts.fc_mapping == "pim":
        return True
    rep = Command(0, Kind.MU_FC, "", 0, set(),
                  OperandDesc(n_tokens=1, weight_rows=model.head_dim, weight_cols=model.embedding_dim,
                              channels=head_channels(hw, 0)))
    (c,) = adaptive_map_fc([rep], 1, hw, _default_mapping_model(hw, plan))
    return c.kind is Kind.PIM_MACRO


def build_commands(model: ModelConfig, hw: HardwareConfig, stage: Stage,
                   opts: CompileOptions | None = None, plan: AllocationPlan | None = None) -> StagePlan:
    """Compile one stage into per-core command streams."""
    opts = opts or CompileOptions()
    nd = opts.n_devices
    heads = model.num_heads // nd
    if model.num_heads % nd or heads % hw.num_cores:
        raise CompileError(
            f"{model.name}: {model.num_heads} heads cannot be split evenly over {hw.num_cores} cores"
            f" x {nd} device(s); reduce the head count to a multiple (GPT-2 XL is run with 24 heads"
            " instead of 25 for this reason)")
    plan = plan or plan_allocation(model, hw, n_devices=nd, check_capacity=False)
    b = _Builder(model, hw, stage, plan, opts)
    b.qkv_on_pim = _qkv_on_pim(model, hw, stage, opts, plan)
    b.build()
    logical = b.cmds
    if plan.mode == "plain" or opts.fc_mapping == "mu":
        mapped = logical
    elif opts.fc_mapping == "pim":
        mapped = [replace(c, kind=Kind.PIM_MACRO, op="fc") if c.kind is Kind.MU_FC and c.tiles is not None
                  else c for c in logical]
    else:
        am = _default_mapping_model(hw, plan)
        # the memory-aware reorder runs over each core's program order
        decided: dict[int, Command] = {}
        for core in range(hw.num_cores):
            stream = [c for c in logical if c.core == core]
            for c in adaptive_map_fc(stream, stage.n_tokens, hw, am):
                decided[c.id] = c
        mapped = [decided.get(c.id, c) for c in logical]
    cmds = b.lower(mapped)
    cyc = topo_validate(cmds)
    if cyc:
        raise CompileError(f"dependency cycle in generated stream: {cyc}")
    per_core = {c: [x for x in cmds if x.core == c] for c in range(hw.num_cores)}
    syncs = [c.id for c in cmds if c.kind is Kind.SYNC]
    mapping = _summarize_mapping(mapped)
    return StagePlan(stage, cmds, per_core, syncs, b.nblocks, b.attn, mapping, nd)


def _summarize_mapping(cmds: Sequence[Command]) -> dict[str, str]:
    seen: dict[str, set] = {}
    for c in cmds:
        if c.kind in (Kind.MU_FC, Kind.PIM_MACRO) and c.op_class in ("fc_qkv", "fc_proj", "ffn", "lm_head") \
                and c.name and not c.name.startswith(("qkt", "sv", "qa")):
            seen.setdefault(c.op_class, set()).add("PIM" if c.kind is Kind.PIM_MACRO else "MU")
    return {k: (v.pop() if len(v) == 1 else "mixed") for k, v in seen.items()}


def compile_stage_text(model: ModelConfig, hw: HardwareConfig, stage: Stage,
                       opts: CompileOptions | None = None) -> str:
    return build_commands(model, hw, stage, opts).emit_plan()


__all__ = [
    "AnalyticalModel", "AttentionSchedule", "CompileError", "CompileOptions", "Stage", "StagePlan",
    "Variant", "adaptive_map_fc", "build_commands", "estimate_unit_time", "mu_tiles", "pipe",
    "schedule_attention",
]
