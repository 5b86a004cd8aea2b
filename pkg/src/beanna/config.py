"""Simulation/energy settings and the JSON run-config loader."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema

from .systolic import TILE_OVERHEAD_CYCLES, WEIGHT_LOAD_CYCLES

CLOCK_HZ = 100e6


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass
class SimConfig:
    """Timing and capacity knobs of the modelled device.

    ``overlap`` lets the next tile's weight load hide behind the current
    stream and the next layer's off-chip weight fetch hide behind the
    current layer's compute. Off by default.
    """

    clock_hz: float = CLOCK_HZ
    dma_bus_bytes: int = 8
    array_port_bytes: int = 32  # one 16-element bf16 row per cycle
    overlap: bool = False
    weight_load_cycles: int = WEIGHT_LOAD_CYCLES
    tile_overhead_cycles: int = TILE_OVERHEAD_CYCLES
    command_cycles: int = 1
    psum_precision: str = "bf16"
    act_bram_bytes: int = 2 * 1024 * 256 * 2  # two ping-pong buffers of 1024 x 256 bf16
    weight_bram_bytes: int = 1024 * 1024 * 2 + 1024 * 16  # one layer + its norm params
    psum_bram_entries: int = 256 * 16
    max_lane_elements: int = 1 << 24  # simulation memory bound, no timing effect

    def __post_init__(self):
        if self.dma_bus_bytes <= 0 or self.array_port_bytes <= 0:
            raise ConfigError("bus widths must be positive")
        if self.clock_hz <= 0:
            raise ConfigError("clock_hz must be positive")
        if self.psum_precision not in ("bf16", "fp32"):
            raise ConfigError("psum_precision must be 'bf16' or 'fp32'")


@dataclass
class EnergyConfig:
    """Board power per variant, taken as inputs (watts)."""

    total_power_float_watts: float = 2.135
    total_power_hybrid_watts: float = 2.150
    static_power_watts: float = 0.600

    def __post_init__(self):
        if self.static_power_watts > min(self.total_power_float_watts, self.total_power_hybrid_watts):
            raise ConfigError("static power cannot exceed total power")

    def total_power(self, variant: str) -> float:
        if variant == "float":
            return self.total_power_float_watts
        if variant == "hybrid":
            return self.total_power_hybrid_watts
        raise ValueError(f"unknown variant {variant!r}")


@dataclass
class TrainConfig:
    layers: list = field(default_factory=lambda: [784, 256, 256, 256, 10])
    precision: list = field(default_factory=lambda: ["float", "float", "float", "float"])
    epochs: int = 20
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1
    seed: int = 0
    workers: int = 1


def load_schema(name: str) -> dict:
    text = resources.files("beanna").joinpath("schemas", name).read_text()
    return json.loads(text)


def validate(doc: dict, schema_name: str):
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{schema_name}: {where}: {exc.message}") from None


@dataclass
class RunConfig:
    network: dict
    train: TrainConfig
    energy: EnergyConfig
    sim: SimConfig
    batch_size: int = 256
    paths: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def path(self, key: str) -> Path | None:
        value = self.paths.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | str = ".") -> RunConfig:
        validate(doc, "config.schema.json")
        net = doc["network"]
        if len(net["precision"]) != len(net["layers"]) - 1:
            raise ConfigError("network: need one precision per weight layer")
        train_doc = dict(doc.get("train", {}))
        train_doc.setdefault("layers", net["layers"])
        train_doc.setdefault("precision", net["precision"])
        cal = dict(doc.get("calibration", {}))
        if "clock_hz" in doc:
            cal["clock_hz"] = doc["clock_hz"]
        return cls(
            network=net,
            train=TrainConfig(**train_doc),
            energy=EnergyConfig(**doc.get("energy", {})),
            sim=SimConfig(**cal),
            batch_size=doc.get("batch_size", 256),
            paths=dict(doc.get("paths", {})),
            base_dir=Path(base_dir),
        )

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)


def sim_config_dict(cfg: SimConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def energy_config_dict(cfg: EnergyConfig) -> dict:
    return asdict(cfg)
