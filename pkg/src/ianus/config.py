"""Hardware and model configuration records.

Everything is a frozen dataclass so a loaded configuration can be shared
freely between simulations. Defaults reproduce the reference NPU-PIM
machine: four 700 MHz cores with 128x64 systolic arrays, eight GDDR6
channels of AiM-style PIM (two channels per chip, 16 banks per channel).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB

MEMORY_MODES = ("unified", "partitioned", "plain")


class ConfigError(ValueError):
    """Raised for malformed configuration files or violated invariants."""


@dataclass(frozen=True)
class TimingParams:
    """DRAM timing constraints in nanoseconds (GDDR6, 16 Gb/s)."""

    tCK: float = 0.5
    tCCD_S: float = 1.0
    tCCD_L: float = 1.0
    tRAS: float = 21.0
    tWR: float = 36.0
    tRP: float = 30.0
    tRCDRD: float = 36.0
    tRCDWR: float = 24.0
    # PIM-side costs, in tCK cycles
    pim_mac_cycles_per_column_burst: int = 2
    pim_gb_write_cycles: int = 2
    pim_act_func_cycles: int = 32

    def cycles(self, name: str) -> int:
        """Return a ns-valued constraint rounded up to whole tCK cycles."""
        return math.ceil(getattr(self, name) / self.tCK - 1e-9)


@dataclass(frozen=True)
class EnergyParams:
    """Dynamic energy per event, in joules."""

    e_dram_read: float = 1.41e-9  # per 32 B column access
    e_dram_write: float = 1.50e-9
    e_dram_activate: float = 1.20e-9  # per bank row activation
    e_mu_mac: float = 1.0e-12
    e_vu_op: float = 2.0e-12
    pim_to_read_ratio: float = 3.0

    @property
    def e_pim_op(self) -> float:
        # one all-bank MAC column burst on one channel
        return self.pim_to_read_ratio * self.e_dram_read


@dataclass(frozen=True)
class HardwareConfig:
    num_cores: int = 4
    npu_freq: float = 700e6
    mu_rows: int = 128
    mu_cols: int = 64
    macs_per_pe: int = 4
    vu_lanes: int = 16
    vu_width: int = 4
    am_capacity: int = 12 * MiB
    wm_capacity: int = 4 * MiB
    issue_queue_slots: int = 4
    pending_queue_slots: int = 256
    num_channels: int = 8
    banks_per_channel: int = 16
    channels_per_chip: int = 2
    chip_capacity: int = 2 * GiB
    pim_chips: int | None = None  # PIM-capable chips; None means all of them
    row_size: int = 2048
    column_bytes: int = 32
    pin_rate: float = 16e9
    pins_per_channel: int = 16
    pu_freq: float = 1e9
    pu_flops: float = 32e9
    global_buffer_size: int = 2048
    timing: TimingParams = field(default_factory=TimingParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    pcie_bw: float = 64e9
    pcie_latency_ns: float = 1000.0
    dma_overhead_ns: float = 200.0
    dma_chunk_bytes: int = 256 * KiB
    onchip_bytes_per_cycle: int = 256
    vu_startup_cycles: int = 32
    noc_hop_ns: float = 1.0 / 0.7
    noc_bytes_per_ns: float = 256.0
    deadlock_budget_ns: float = 1e9
    memory_mode: str = "unified"
    # who a running macro blocks: DMAs of the issuing core, or every core's
    pim_block_scope: str = "device"

    # ---- derived quantities -------------------------------------------

    @property
    def dtype_bytes(self) -> int:
        return 2

    @property
    def num_chips(self) -> int:
        return self.num_channels // self.channels_per_chip

    @property
    def total_capacity(self) -> int:
        return self.num_chips * self.chip_capacity

    @property
    def channel_bw(self) -> float:
        """Pin bandwidth of one channel in bytes/s."""
        return self.pin_rate * self.pins_per_channel / 8

    @property
    def external_bw(self) -> float:
        return self.channel_bw * self.num_channels

    @property
    def elems_per_column(self) -> int:
        return self.column_bytes // self.dtype_bytes

    @property
    def elems_per_row(self) -> int:
        return self.row_size // self.dtype_bytes

    @property
    def mu_peak_flops(self) -> float:
        return self.mu_rows * self.mu_cols * self.macs_per_pe * 2 * self.npu_freq

    @property
    def wm_entry_bytes(self) -> int:
        return self.mu_cols * self.dtype_bytes

    @property
    def am_entry_bytes(self) -> int:
        return self.mu_rows * self.dtype_bytes

    @property
    def npu_cycle_ns(self) -> float:
        return 1e9 / self.npu_freq

    @property
    def n_pim_chips(self) -> int:
        if self.memory_mode == "plain":
            return 0
        if self.pim_chips is not None:
            return self.pim_chips
        if self.memory_mode == "partitioned":
            return self.num_chips // 2
        return self.num_chips

    def pim_channels(self) -> tuple[int, ...]:
        """Channels whose banks carry processing units.

        In partitioned mode the PIM half sits above the plain-DRAM half.
        """
        n = self.n_pim_chips * self.channels_per_chip
        if self.memory_mode == "partitioned":
            return tuple(range(self.num_channels - n, self.num_channels))
        return tuple(range(n))

    def normal_channels(self) -> tuple[int, ...]:
        """Channels the NPU reads and writes with ordinary DMA."""
        if self.memory_mode == "partitioned":
            pim = set(self.pim_channels())
            return tuple(c for c in range(self.num_channels) if c not in pim)
        return tuple(range(self.num_channels))

    def with_mode(self, mode: str) -> "HardwareConfig":
        return replace(self, memory_mode=mode)


@dataclass(frozen=True)
class PeakReport:
    mu_flops_per_core: float
    mu_flops_total: float
    pim_flops_per_chip: float
    pim_flops_total: float
    external_bw: float
    internal_bw_per_chip: float
    internal_bw: float


@dataclass(frozen=True)
class ModelConfig:
    name: str
    family: str  # "gpt" or "bert"
    embedding_dim: int
    head_dim: int
    num_heads: int
    num_blocks: int
    num_params: int
    vocab_size: int = 50257
    max_positions: int = 1024
    dtype_bytes: int = 2
    input_tokens: int = 128
    output_tokens: int = 1

    @property
    def ffn_dim(self) -> int:
        return 4 * self.embedding_dim

    def with_tokens(self, input_tokens: int, output_tokens: int) -> "ModelConfig":
        return replace(self, input_tokens=input_tokens, output_tokens=output_tokens)


_GPT = dict(family="gpt", vocab_size=50257, max_positions=1024)
_BERT = dict(family="bert", vocab_size=30522, max_positions=512, output_tokens=1)

MODEL_PRESETS: dict[str, ModelConfig] = {
    "bert-b": ModelConfig("bert-b", embedding_dim=768, head_dim=64, num_heads=12, num_blocks=12, num_params=110_000_000, **_BERT),
    "bert-l": ModelConfig("bert-l", embedding_dim=1024, head_dim=64, num_heads=16, num_blocks=24, num_params=340_000_000, **_BERT),
    "bert-1.3b": ModelConfig("bert-1.3b", embedding_dim=2048, head_dim=64, num_heads=32, num_blocks=24, num_params=1_300_000_000, **_BERT),
    "bert-3.9b": ModelConfig("bert-3.9b", embedding_dim=2560, head_dim=64, num_heads=40, num_blocks=48, num_params=3_900_000_000, **_BERT),
    "gpt2-m": ModelConfig("gpt2-m", embedding_dim=1024, head_dim=64, num_heads=16, num_blocks=24, num_params=345_000_000, **_GPT),
    "gpt2-l": ModelConfig("gpt2-l", embedding_dim=1280, head_dim=64, num_heads=20, num_blocks=36, num_params=762_000_000, **_GPT),
    # 25 heads reduced to 24 so heads split evenly over four cores
    "gpt2-xl": ModelConfig("gpt2-xl", embedding_dim=1536, head_dim=64, num_heads=24, num_blocks=48, num_params=1_500_000_000, **_GPT),
    "gpt2-2.5b": ModelConfig("gpt2-2.5b", embedding_dim=1920, head_dim=96, num_heads=20, num_blocks=54, num_params=2_500_000_000, **_GPT),
    "gpt-6.7b": ModelConfig("gpt-6.7b", embedding_dim=4096, head_dim=128, num_heads=32, num_blocks=32, num_params=6_700_000_000, **dict(_GPT, max_positions=2048)),
    "gpt-13b": ModelConfig("gpt-13b", embedding_dim=5120, head_dim=128, num_heads=40, num_blocks=40, num_params=13_000_000_000, **dict(_GPT, max_positions=2048)),
    "gpt-30b": ModelConfig("gpt-30b", embedding_dim=7168, head_dim=128, num_heads=56, num_blocks=48, num_params=30_000_000_000, **dict(_GPT, max_positions=2048)),
}

MODEL_ALIASES = {
    "m": "gpt2-m", "l": "gpt2-l", "xl": "gpt2-xl", "2.5b": "gpt2-2.5b",
    "6.7b": "gpt-6.7b", "13b": "gpt-13b", "30b": "gpt-30b",
    "b": "bert-b", "bert-base": "bert-b", "bert-large": "bert-l",
}


# ---------------------------------------------------------------------------
# validation


def validate_hardware(hw: HardwareConfig) -> HardwareConfig:
    checks = [
        ("num_cores > 0", hw.num_cores > 0),
        ("npu_freq > 0", hw.npu_freq > 0),
        ("mu_rows > 0 and mu_cols > 0", hw.mu_rows > 0 and hw.mu_cols > 0),
        ("macs_per_pe > 0", hw.macs_per_pe > 0),
        ("vu_lanes * vu_width > 0", hw.vu_lanes * hw.vu_width > 0),
        ("issue_queue_slots > 0", hw.issue_queue_slots > 0),
        ("pending_queue_slots > 0", hw.pending_queue_slots > 0),
        ("num_channels > 0", hw.num_channels > 0),
        ("banks_per_channel > 0", hw.banks_per_channel > 0),
        ("num_channels % channels_per_chip == 0",
         hw.channels_per_chip > 0 and hw.num_channels % hw.channels_per_chip == 0),
        ("row_size % column_bytes == 0", hw.column_bytes > 0 and hw.row_size % hw.column_bytes == 0),
        ("column_bytes % dtype_bytes == 0", hw.column_bytes % hw.dtype_bytes == 0),
        ("am entry == 2 * wm entry", hw.am_entry_bytes == 2 * hw.wm_entry_bytes),
        ("pu_flops >= 0", hw.pu_flops >= 0),
        ("global_buffer_size >= column_bytes", hw.global_buffer_size >= hw.column_bytes),
        ("memory_mode in unified|partitioned|plain", hw.memory_mode in MEMORY_MODES),
        ("pim_chips within 0..num_chips",
         hw.pim_chips is None or 0 <= hw.pim_chips <= hw.num_chips),
        ("pcie_bw > 0", hw.pcie_bw > 0),
        ("onchip_bytes_per_cycle > 0", hw.onchip_bytes_per_cycle > 0),
    ]
    t = hw.timing
    for name in ("tCK", "tCCD_S", "tCCD_L", "tRAS", "tWR", "tRP", "tRCDRD", "tRCDWR"):
        checks.append((f"timing.{name} > 0", getattr(t, name) > 0))
    for name in ("pim_mac_cycles_per_column_burst", "pim_gb_write_cycles"):
        checks.append((f"timing.{name} > 0", getattr(t, name) > 0))
    e = hw.energy
    for f in fields(e):
        checks.append((f"energy.{f.name} >= 0", getattr(e, f.name) >= 0))
    for label, ok in checks:
        if not ok:
            raise ConfigError(f"hardware invariant violated: {label}")
    return hw


def validate_model(model: ModelConfig) -> ModelConfig:
    if model.family not in ("gpt", "bert"):
        raise ConfigError(f"model invariant violated: family must be gpt or bert, got {model.family!r}")
    if model.dtype_bytes != 2:
        raise ConfigError("model invariant violated: only BF16 (dtype_bytes=2) is supported")
    for name in ("embedding_dim", "head_dim", "num_heads", "num_blocks"):
        if getattr(model, name) <= 0:
            raise ConfigError(f"model invariant violated: {name} > 0")
    if model.embedding_dim != model.head_dim * model.num_heads:
        raise ConfigError("model invariant violated: embedding_dim == head_dim * num_heads")
    if model.input_tokens < 1:
        raise ConfigError("model invariant violated: input_tokens >= 1")
    if model.output_tokens < 1:
        raise ConfigError("model invariant violated: output_tokens >= 1")
    if model.family == "bert" and model.output_tokens != 1:
        raise ConfigError("model invariant violated: bert models produce exactly one output step")
    return model


def derive_peaks(hw: HardwareConfig) -> PeakReport:
    per_core = hw.mu_peak_flops
    pus_per_chip = hw.banks_per_channel * hw.channels_per_chip
    pim_chip = pus_per_chip * hw.pu_flops
    # every PU streams one column per PU cycle out of its own bank
    internal_chip = pus_per_chip * hw.pu_freq * hw.column_bytes
    return PeakReport(
        mu_flops_per_core=per_core,
        mu_flops_total=per_core * hw.num_cores,
        pim_flops_per_chip=pim_chip,
        pim_flops_total=pim_chip * hw.num_chips,
        external_bw=hw.external_bw,
        internal_bw_per_chip=internal_chip,
        internal_bw=internal_chip * hw.num_chips,
    )


# ---------------------------------------------------------------------------
# text format


def _to_tree(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_tree(getattr(obj, f.name)) for f in fields(obj)}
    return obj


def _build(cls, tree: Mapping[str, Any], where: str):
    if not isinstance(tree, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(tree).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in tree.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key == "timing":
            value = _build(TimingParams, value, f"{where}.timing")
        elif key == "energy":
            value = _build(EnergyParams, value, f"{where}.energy")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def hardware_from_dict(tree: Mapping[str, Any]) -> HardwareConfig:
    return validate_hardware(_build(HardwareConfig, tree, "hardware"))


def model_from_dict(tree: Mapping[str, Any]) -> ModelConfig:
    tree = dict(tree)
    base = tree.pop("preset", None)
    if base is not None:
        model = replace(get_model(base), **tree)
    else:
        model = _build(ModelConfig, tree, "model")
    return validate_model(model)


def dump_config(hw: HardwareConfig | None = None, model: ModelConfig | None = None) -> str:
    tree = {}
    if hw is not None:
        tree["hardware"] = _to_tree(hw)
    if model is not None:
        tree["model"] = _to_tree(model)
    return yaml.safe_dump(tree, sort_keys=False)


def parse_config(text: str) -> tuple[HardwareConfig, ModelConfig | None]:
    try:
        tree = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"parse error{line}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(tree, Mapping):
        raise ConfigError("parse error at line 1: top level must be a mapping")
    unknown = set(tree) - {"hardware", "model"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    hw = hardware_from_dict(tree.get("hardware") or {})
    model = model_from_dict(tree["model"]) if tree.get("model") else None
    return hw, model


def load_config(path: str | Path) -> tuple[HardwareConfig, ModelConfig | None]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def get_model(name_or_path: str, input_tokens: int | None = None,
              output_tokens: int | None = None) -> ModelConfig:
    """Resolve a preset name (case-insensitive, short aliases allowed) or a YAML file."""
    key = name_or_path.lower()
    key = MODEL_ALIASES.get(key, key)
    if key in MODEL_PRESETS:
        model = MODEL_PRESETS[key]
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ConfigError(f"unknown model {name_or_path!r}; presets: {', '.join(MODEL_PRESETS)}")
        _, model = load_config(path)
        if model is None:
            raise ConfigError(f"{path} has no model section")
    if input_tokens is not None or output_tokens is not None:
        model = model.with_tokens(
            input_tokens if input_tokens is not None else model.input_tokens,
            output_tokens if output_tokens is not None else model.output_tokens,
        )
    return validate_model(model)


def default_hardware(mode: str = "unified", **overrides) -> HardwareConfig:
    return validate_hardware(HardwareConfig(memory_mode=mode, **overrides))
