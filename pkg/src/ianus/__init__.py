"""Performance simulator for an NPU whose main memory is PIM-capable DRAM."""

from .compiler import CompileOptions, Stage, StagePlan, adaptive_map_fc, build_commands, schedule_attention
from .config import (ConfigError, HardwareConfig, ModelConfig, default_hardware, derive_peaks, get_model,
                     load_config)
from .engine import RunOptions, SimReport, run, run_multi_device, simulate_stage
from .memmap import AllocationPlan, TileMap, plan_allocation, tile_weight_matrix
from .pim import validate_trace
from .scenarios import SCENARIOS, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AllocationPlan", "CompileOptions", "ConfigError", "HardwareConfig", "ModelConfig", "RunOptions",
    "SCENARIOS", "SimReport", "Stage", "StagePlan", "TileMap", "adaptive_map_fc", "build_commands",
    "default_hardware", "derive_peaks", "get_model", "load_config", "plan_allocation", "run",
    "run_multi_device", "run_scenario", "schedule_attention", "simulate_stage", "tile_weight_matrix",
    "validate_trace",
]
