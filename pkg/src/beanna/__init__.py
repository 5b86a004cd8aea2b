"""Dual-precision (bfloat16 + binary) systolic accelerator model and hybrid BNN trainer."""

from .config import ConfigError, EnergyConfig, RunConfig, SimConfig, TrainConfig
from .network import (
    LayerSpec,
    Network,
    NetworkSpec,
    forward_functional,
    reference_network,
    predict,
    run_inference,
)
from .perf import PerfReport, estimate_perf, memory_footprint
from .systolic import Mode, SystolicArray

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EnergyConfig",
    "LayerSpec",
    "Mode",
    "Network",
    "NetworkSpec",
    "PerfReport",
    "RunConfig",
    "SimConfig",
    "SystolicArray",
    "TrainConfig",
    "estimate_perf",
    "forward_functional",
    "memory_footprint",
    "reference_network",
    "predict",
    "run_inference",
]
