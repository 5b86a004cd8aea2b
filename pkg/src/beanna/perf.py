"""Timing, memory, op-count and energy accounting; the JSON report.

Ops are multiplies plus adds: every MAC is two ops and every partial sum
folded into the accumulators is one more. Under that convention the array
peaks at 528 ops/cycle in FLOAT mode and 8208 in BINARY mode.

Two rates are reported. ``inferences_per_second`` leaves out the off-chip
weight fetch, i.e. weights staged ahead of the batch (the fetch is paid
once per deployment or hidden behind the previous batch);
``inferences_per_second_inclusive`` charges it to every batch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .binary import n_words
from .config import EnergyConfig, SimConfig, energy_config_dict, sim_config_dict, validate
from .network import LayerSpec, NetworkSpec, tile_layer
from .systolic import ARRAY_DIM, Mode, peak_ops_per_cycle

REPORT_VERSION = 1
BF16_BYTES = 2
BN_PARAM_BYTES = 16  # gamma, beta, mean, var as float32
TILE_WEIGHT_BYTES = ARRAY_DIM * ARRAY_DIM * 2


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def layer_weight_bytes(layer: LayerSpec) -> int:
    if layer.precision is Mode.FLOAT:
        return BF16_BYTES * layer.in_dim * layer.out_dim
    return layer.out_dim * n_words(layer.in_dim) * 2


def memory_footprint(net: NetworkSpec) -> int:
    """Weight bytes only; normalization parameters are reported separately."""
    return sum(layer_weight_bytes(layer) for layer in net.layers)


def bn_param_bytes(net: NetworkSpec) -> int:
    return sum(BN_PARAM_BYTES * layer.out_dim for layer in net.layers)


def energy_per_inference(cfg: EnergyConfig, rate: float, variant: str) -> float:
    """Joules per inference at ``rate`` inferences/second."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    return cfg.total_power(variant) / rate


def activation_row_bytes(dim: int, consumer: LayerSpec | None) -> int:
    """Bytes per batch row of a ``dim``-wide activation vector."""
    if consumer is not None and consumer.precision is Mode.BINARY:
        return n_words(dim) * 2
    return dim * BF16_BYTES


def drain_group_bytes(valid_cols: int, batch: int, consumer: LayerSpec | None) -> int:
    """Bytes DMA 2 writes for one 16-column output group."""
    if consumer is not None and consumer.precision is Mode.BINARY:
        return batch * 2
    return batch * valid_cols * BF16_BYTES


def result_elem_bytes(sim: SimConfig) -> int:
    """Logits leave as bf16, or float32 when partial sums are kept in float32."""
    return BF16_BYTES if sim.psum_precision == "bf16" else 4


def layer_ops(layer: LayerSpec, batch: int) -> int:
    sched = tile_layer(layer)
    return 2 * batch * layer.in_dim * layer.out_dim + batch * layer.out_dim * sched.k_tiles


@dataclass
class LayerPerf:
    index: int
    precision: str
    in_dim: int
    out_dim: int
    k_tiles: int
    n_tiles: int
    tiles: int
    weight_bytes: int
    bn_bytes: int
    offchip_cycles: int
    exposed_offchip_cycles: int
    load_cycles: int
    stream_cycles: int
    drain_cycles: int
    compute_cycles: int
    ops: int
    utilization: float


@dataclass
class PerfReport:
    mode: str
    variant: str
    batch: int
    clock_hz: float
    network: list
    layers: list
    command_cycles: int
    input_cycles: int
    output_cycles: int
    total_cycles: int
    amortized_cycles: int
    inferences_per_second: float
    inferences_per_second_inclusive: float
    ops: int
    utilization: float
    dma_bytes: dict
    memory_bytes: int
    bn_param_bytes: int
    peak_ops_per_cycle: dict
    peak_gops: float
    power_watts: float
    energy_per_inference_j: float
    energy_per_inference_inclusive_j: float
    calibration: dict
    accuracy: float | None = None
    schema_version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        doc = asdict(self)
        validate(doc, "report.schema.json")
        return doc

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=kw.pop("indent", 2), **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> PerfReport:
        validate(doc, "report.schema.json")
        doc = dict(doc)
        doc["layers"] = [LayerPerf(**l) for l in doc["layers"]]
        return cls(**doc)


@dataclass
class _Counters:
    """Raw cycle and byte counts, filled analytically or by the simulator."""

    command_cycles: int = 0
    input_cycles: int = 0
    output_cycles: int = 0
    layers: list = field(default_factory=list)
    dma_bytes: dict = field(
        default_factory=lambda: {
            "dma0_weights": 0,
            "dma0_bn": 0,
            "dma0_input": 0,
            "dma0_output": 0,
            "dma1": 0,
            "dma2": 0,
        }
    )


def command_count(net: NetworkSpec) -> int:
    # configure-layer + set-mode per layer, then start and read-status
    return 2 * len(net.layers) + 2


def tile_timing(batch: int, sim: SimConfig, first_in_layer: bool) -> tuple[int, int]:
    """``(load, stream)`` cycles for one tile under the calibration knobs."""
    load = sim.weight_load_cycles if (first_in_layer or not sim.overlap) else 0
    return load, batch + sim.tile_overhead_cycles


def expose_offchip(layers: list, sim: SimConfig):
    """Apply fetch/compute overlap to the per-layer off-chip weight cycles."""
    prev_compute = None
    for lp in layers:
        if sim.overlap and prev_compute is not None:
            lp.exposed_offchip_cycles = max(0, lp.offchip_cycles - prev_compute)
        else:
            lp.exposed_offchip_cycles = lp.offchip_cycles
        prev_compute = lp.compute_cycles


def finish_report(net: NetworkSpec, batch: int, counters: _Counters, sim: SimConfig,
                  energy: EnergyConfig, mode: str) -> PerfReport:
    layers = counters.layers
    expose_offchip(layers, sim)
    for lp in layers:
        peak = peak_ops_per_cycle(Mode(lp.precision))
        lp.utilization = lp.ops / (peak * lp.compute_cycles)
    fixed = counters.command_cycles + counters.input_cycles + counters.output_cycles
    compute = sum(lp.compute_cycles for lp in layers)
    exposed = sum(lp.exposed_offchip_cycles for lp in layers)
    total = fixed + compute + exposed
    amortized = total - exposed
    rate = sim.clock_hz * batch / amortized
    rate_incl = sim.clock_hz * batch / total
    variant = net.variant
    modes_used = {layer.precision for layer in net.layers}
    ops = sum(lp.ops for lp in layers)
    capacity = sum(peak_ops_per_cycle(Mode(lp.precision)) * lp.compute_cycles for lp in layers)
    return PerfReport(
        mode=mode,
        variant=variant,
        batch=batch,
        clock_hz=sim.clock_hz,
        network=[
            {"in_dim": l.in_dim, "out_dim": l.out_dim, "precision": l.precision.value}
            for l in net.layers
        ],
        layers=layers,
        command_cycles=counters.command_cycles,
        input_cycles=counters.input_cycles,
        output_cycles=counters.output_cycles,
        total_cycles=total,
        amortized_cycles=amortized,
        inferences_per_second=rate,
        inferences_per_second_inclusive=rate_incl,
        ops=ops,
        utilization=ops / capacity,
        dma_bytes=dict(counters.dma_bytes),
        memory_bytes=memory_footprint(net),
        bn_param_bytes=bn_param_bytes(net),
        peak_ops_per_cycle={m.value: peak_ops_per_cycle(m) for m in Mode},
        peak_gops=max(peak_ops_per_cycle(m) for m in modes_used) * sim.clock_hz / 1e9,
        power_watts=energy.total_power(variant),
        energy_per_inference_j=energy_per_inference(energy, rate, variant),
        energy_per_inference_inclusive_j=energy_per_inference(energy, rate_incl, variant),
        calibration=sim_config_dict(sim) | {"energy": energy_config_dict(energy)},
    )


def estimate_perf(net: NetworkSpec, batch: int, sim: SimConfig | None = None,
                  energy: EnergyConfig | None = None) -> PerfReport:
    """Closed-form timing of the dataflow, no values computed."""
    sim = sim or SimConfig()
    energy = energy or EnergyConfig()
    c = _Counters()
    bus = sim.dma_bus_bytes
    c.command_cycles = command_count(net) * sim.command_cycles
    first = net.layers[0]
    c.dma_bytes["dma0_input"] = batch * activation_row_bytes(first.in_dim, first)
    c.input_cycles = ceil_div(c.dma_bytes["dma0_input"], bus)
    last = net.layers[-1]
    c.dma_bytes["dma0_output"] = batch * last.out_dim * result_elem_bytes(sim)
    c.output_cycles = ceil_div(c.dma_bytes["dma0_output"], bus)

    for k, layer in enumerate(net.layers):
        consumer = net.layers[k + 1] if k + 1 < len(net.layers) else None
        sched = tile_layer(layer)
        wb, bb = layer_weight_bytes(layer), BN_PARAM_BYTES * layer.out_dim
        offchip = ceil_div(wb, bus) + ceil_div(bb, bus)
        load = stream = drain = 0
        for n in range(sched.n_tiles):
            for kt in range(sched.k_tiles):
                l_, s_ = tile_timing(batch, sim, first_in_layer=(n == 0 and kt == 0))
                load += l_
                stream += s_
            valid = min(ARRAY_DIM, layer.out_dim - n * ARRAY_DIM)
            gb = drain_group_bytes(valid, batch, consumer)
            c.dma_bytes["dma2"] += gb
            drain += ceil_div(gb, bus)
        c.dma_bytes["dma0_weights"] += wb
        c.dma_bytes["dma0_bn"] += bb
        c.dma_bytes["dma1"] += sched.count * TILE_WEIGHT_BYTES
        c.layers.append(
            LayerPerf(
                index=k,
                precision=layer.precision.value,
                in_dim=layer.in_dim,
                out_dim=layer.out_dim,
                k_tiles=sched.k_tiles,
                n_tiles=sched.n_tiles,
                tiles=sched.count,
                weight_bytes=wb,
                bn_bytes=bb,
                offchip_cycles=offchip,
                exposed_offchip_cycles=offchip,
                load_cycles=load,
                stream_cycles=stream,
                drain_cycles=drain,
                compute_cycles=load + stream + drain,
                ops=layer_ops(layer, batch),
                utilization=0.0,
            )
        )
    return finish_report(net, batch, c, sim, energy, "functional")
