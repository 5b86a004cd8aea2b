"""Control module, BRAMs, DMA controllers and off-chip memory.

``Accelerator.execute_dataflow`` walks the inference procedure step by
step and records each step number in ``trace``:

1. host commands reach the controller
2. DMA 0 copies input activations off-chip -> activations BRAM
3. DMA 0 copies one layer's weights (and norm params) off-chip -> weights BRAM
4. DMA 1 loads a weight tile into the array
5. the array mode is set for the layer
6. activations stream through the array
7. column outputs fold into the partial-sum accumulators
8. loop back to 4 while the layer has tiles left
9. DMA 2 drains an output group through activation/normalization into the
   activations BRAM
10. loop back to 3 while layers remain
11. DMA 0 writes results off-chip

The accumulators hold one 16-column output group, so step 9 runs once per
group; the trace grammar in :func:`check_trace` allows 9 -> 8 -> 4.

Tile values come from the stepped :class:`~beanna.systolic.SystolicArray`.
All tiles of a layer are stepped as lockstep lanes first, then the
controller replays the per-tile events in schedule order, which is what
fixes the accumulation order.
"""

from __future__ import annotations

import re
import struct
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from . import bf16
from .config import EnergyConfig, SimConfig
from .network import (
    LayerSpec,
    Network,
    NetworkSpec,
    accumulate_float,
    layer_postprocess,
    padded_binary_operands,
    padded_float_operands,
    prepare_input,
    tile_layer,
)
from .perf import (
    BF16_BYTES,
    TILE_WEIGHT_BYTES,
    LayerPerf,
    _Counters,
    activation_row_bytes,
    ceil_div,
    drain_group_bytes,
    finish_report,
    layer_ops,
    result_elem_bytes,
    tile_timing,
)
from .systolic import ARRAY_DIM, Mode, SystolicArray, tile_cycles
from .weightfile import LayerRecord, WeightFileError, layout, read_bn
from . import weightfile


class BramCapacityError(RuntimeError):
    """The configuration does not fit the modelled on-chip memories."""


class DmaRouteError(ValueError):
    pass


class Endpoint(Enum):
    OFFCHIP = "offchip"
    ACTIVATIONS = "activations"
    WEIGHTS = "weights"
    PSUM = "psum_accumulators"
    ARRAY = "array"


ROUTES = {
    0: {
        (Endpoint.OFFCHIP, Endpoint.ACTIVATIONS),
        (Endpoint.OFFCHIP, Endpoint.WEIGHTS),
        (Endpoint.ACTIVATIONS, Endpoint.OFFCHIP),
    },
    1: {(Endpoint.WEIGHTS, Endpoint.ARRAY)},
    2: {(Endpoint.PSUM, Endpoint.ACTIVATIONS)},
}


@dataclass(frozen=True)
class DmaDescriptor:
    controller: int
    source: Endpoint
    destination: Endpoint
    byte_count: int

    @property
    def direction(self) -> str:
        return f"{self.source.value}->{self.destination.value}"


def check_route(d: DmaDescriptor):
    if d.controller not in ROUTES:
        raise DmaRouteError(f"no DMA controller {d.controller}")
    if (d.source, d.destination) not in ROUTES[d.controller]:
        raise DmaRouteError(f"DMA {d.controller} cannot move {d.direction}")
    if d.byte_count < 0:
        raise ValueError("negative byte count")


def dma_transfer(d: DmaDescriptor, bus_width_bytes: int = 8) -> int:
    """Cycles to move ``d.byte_count`` bytes over a bus of the given width."""
    check_route(d)
    return ceil_div(d.byte_count, bus_width_bytes)


class DmaController:
    def __init__(self, index: int, bus_width_bytes: int):
        self.index = index
        self.bus_width_bytes = bus_width_bytes
        self.bytes_moved = 0
        self.cycles = 0
        self.transfers = 0

    def transfer(self, source: Endpoint, destination: Endpoint, byte_count: int) -> int:
        d = DmaDescriptor(self.index, source, destination, byte_count)
        cycles = dma_transfer(d, self.bus_width_bytes)
        self.bytes_moved += byte_count
        self.cycles += cycles
        self.transfers += 1
        return cycles


class Bram:
    """Named on-chip memory holding arrays, with a byte capacity.

    Sizes are the device's storage sizes, which can differ from the numpy
    containers (bf16 values live in float32 arrays here).
    """

    def __init__(self, name: str, capacity: int):
        self.name = name
        self.capacity = capacity
        self.contents: dict[str, np.ndarray] = {}
        self.sizes: dict[str, int] = {}

    @property
    def used(self) -> int:
        return sum(self.sizes.values())

    def write(self, key: str, data: np.ndarray, nbytes: int | None = None):
        size = data.nbytes if nbytes is None else nbytes
        other = self.used - self.sizes.get(key, 0)
        if other + size > self.capacity:
            raise BramCapacityError(
                f"{self.name} BRAM overflow: {other + size} bytes > capacity {self.capacity}"
            )
        self.contents[key] = data
        self.sizes[key] = size

    def read(self, key: str) -> np.ndarray:
        return self.contents[key]

    def free(self, key: str):
        self.contents.pop(key, None)
        self.sizes.pop(key, None)


class PsumAccumulator:
    """Accumulator BRAM for one output group: ``batch x 16`` entries."""

    name = "psum_accumulators"

    def __init__(self, entries: int, psum_precision: str = "bf16"):
        self.entries = entries
        self.psum_precision = psum_precision
        self.values: np.ndarray | None = None
        self.mode: Mode | None = None

    def reset(self, batch: int, mode: Mode):
        if batch * ARRAY_DIM > self.entries:
            raise BramCapacityError(
                f"accumulators hold {self.entries} entries, batch {batch} needs {batch * ARRAY_DIM}"
            )
        self.mode = mode
        dtype = np.float32 if mode is Mode.FLOAT else np.int64
        self.values = np.zeros((batch, ARRAY_DIM), dtype=dtype)

    def accumulate(self, incoming: np.ndarray):
        if self.values is None:
            raise RuntimeError("accumulator not initialised")
        if incoming.shape != self.values.shape:
            raise IndexError(f"accumulator is {self.values.shape}, got {incoming.shape}")
        if self.mode is Mode.FLOAT:
            self.values = accumulate_float(self.values, incoming.astype(np.float32), self.psum_precision)
        else:
            self.values = self.values + incoming.astype(np.int64)


def accumulate_psums(column_outputs: np.ndarray, accumulator: PsumAccumulator):
    accumulator.accumulate(column_outputs)


class Opcode(IntEnum):
    CONFIGURE_LAYER = 1
    SET_MODE = 2
    START = 3
    READ_STATUS = 4


@dataclass(frozen=True)
class Command:
    """A control-register write, stood in for by a record.

    Packed form: little-endian u32 words ``opcode, n_operands, operands...``.
    Operands: CONFIGURE_LAYER (layer, precision, in_dim, out_dim, weight_offset,
    bn_offset); SET_MODE (layer, precision); START (batch, input_offset,
    result_offset); READ_STATUS ().
    """

    opcode: Opcode
    operands: tuple = ()

    def pack(self) -> bytes:
        return struct.pack(f"<{2 + len(self.operands)}I", self.opcode, len(self.operands), *self.operands)

    @classmethod
    def unpack(cls, data: bytes) -> Command:
        opcode, n = struct.unpack_from("<2I", data)
        operands = struct.unpack_from(f"<{n}I", data, 8)
        return cls(Opcode(opcode), tuple(operands))


class OffchipMemory:
    def __init__(self, data: bytes):
        self.data = bytearray(data)
        self.bytes_read = 0
        self.bytes_written = 0

    def read(self, offset: int, size: int) -> bytes:
        if offset < 0 or offset + size > len(self.data):
            raise WeightFileError(f"off-chip read {offset}..{offset + size} outside image")
        self.bytes_read += size
        return bytes(self.data[offset : offset + size])

    def write(self, offset: int, payload: bytes):
        if offset < 0 or offset + len(payload) > len(self.data):
            raise IndexError(f"off-chip write {offset}..{offset + len(payload)} outside image")
        self.data[offset : offset + len(payload)] = payload
        self.bytes_written += len(payload)


_TILE = r"4 5 6 7(?: 8 4 5 6 7)* 9"
_LAYER = rf"3 {_TILE}(?: 8 {_TILE})*"
_TRACE = re.compile(rf"^(?:1 )+2 {_LAYER}(?: 10 {_LAYER})* 11$")


def check_trace(trace) -> bool:
    """True if a step trace follows the documented procedure and loops."""
    return bool(_TRACE.match(" ".join(str(s) for s in trace)))


@dataclass
class _LayerConfig:
    record: LayerRecord
    mode: Mode | None = None


class Accelerator:
    """One simulated device instance; single-threaded and deterministic."""

    def __init__(self, sim: SimConfig | None = None, energy: EnergyConfig | None = None):
        self.sim = sim or SimConfig()
        self.energy = energy or EnergyConfig()
        s = self.sim
        self.dma = [
            DmaController(0, s.dma_bus_bytes),
            DmaController(1, s.array_port_bytes),
            DmaController(2, s.dma_bus_bytes),
        ]
        self.act_bram = Bram("activations", s.act_bram_bytes)
        self.weight_bram = Bram("weights", s.weight_bram_bytes)
        self.psum = PsumAccumulator(s.psum_bram_entries, s.psum_precision)
        self.commands: deque[Command] = deque()
        self.trace: list[int] = []
        self.status = "idle"

    # -- host side ---------------------------------------------------------

    def issue(self, cmd: Command):
        self.commands.append(cmd)

    def _host_program(self, records, batch, input_offset, result_offset):
        for k, rec in enumerate(records):
            self.issue(
                Command(
                    Opcode.CONFIGURE_LAYER,
                    (k, rec.precision.code, rec.in_dim, rec.out_dim, rec.weight_offset, rec.bn_offset),
                )
            )
            self.issue(Command(Opcode.SET_MODE, (k, rec.precision.code)))
        self.issue(Command(Opcode.START, (batch, input_offset, result_offset)))
        self.issue(Command(Opcode.READ_STATUS))

    # -- controller ----------------------------------------------------------

    def _process_commands(self, records, counters):
        configs: dict[int, _LayerConfig] = {}
        start = None
        while self.commands:
            cmd = self.commands[0]
            if cmd.opcode is Opcode.READ_STATUS:
                break  # answered once the run finishes
            self.commands.popleft()
            counters.command_cycles += self.sim.command_cycles
            self.trace.append(1)
            if cmd.opcode is Opcode.CONFIGURE_LAYER:
                k = cmd.operands[0]
                configs[k] = _LayerConfig(records[k])
            elif cmd.opcode is Opcode.SET_MODE:
                k, code = cmd.operands
                configs[k].mode = Mode.from_code(code)
            elif cmd.opcode is Opcode.START:
                start = cmd.operands
                break
        if start is None:
            raise RuntimeError("command queue ended without START")
        return configs, start

    def _read_status(self, counters):
        if self.commands and self.commands[0].opcode is Opcode.READ_STATUS:
            self.commands.popleft()
            counters.command_cycles += self.sim.command_cycles
        return self.status

    def execute_dataflow(self, net: Network | bytes, inputs: np.ndarray):
        """Run one batch through the modelled device.

        Returns ``(logits, PerfReport)``; the logits are read back from the
        result block of off-chip memory.
        """
        sim = self.sim
        if isinstance(net, Network):
            image = weightfile.dumps(net)
            spec_for_input = net
        else:
            image = bytes(net)
            spec_for_input = weightfile.loads(image)
        records, weights_end = layout(image)
        x0 = prepare_input(spec_for_input, inputs)
        batch = x0.shape[0]
        if batch < 1:
            raise ValueError("batch must be at least 1")

        out_elem = result_elem_bytes(sim)
        in_block = x0.astype("<f4").view("<u4") >> 16
        in_bytes = in_block.astype("<u2").tobytes()
        input_offset = weights_end
        result_offset = input_offset + len(in_bytes)
        result_bytes = batch * records[-1].out_dim * out_elem
        offchip = OffchipMemory(image + in_bytes + bytes(result_bytes))

        counters = _Counters()
        self.trace = []
        self.status = "running"
        self._host_program(records, batch, input_offset, result_offset)

        # step 1
        configs, (batch_cmd, in_off, res_off) = self._process_commands(records, counters)
        layer_specs = self._layer_specs(offchip.data, records)
        NetworkSpec(list(layer_specs))  # validates the chain

        # step 2
        self.trace.append(2)
        first = records[0]
        nbytes = batch * first.in_dim * BF16_BYTES
        raw = offchip.read(in_off, nbytes)
        counters.input_cycles = self.dma[0].transfer(Endpoint.OFFCHIP, Endpoint.ACTIVATIONS, nbytes)
        counters.dma_bytes["dma0_input"] = nbytes
        x = bf16.from_bits(np.frombuffer(raw, dtype="<u2").reshape(batch, first.in_dim))
        half = self.act_bram.capacity // 2
        self._write_act(0, x, nbytes, half)

        cur = 0
        for k, rec in enumerate(records):
            cfg = configs[k]
            layer = layer_specs[k]
            consumer = layer_specs[k + 1] if k + 1 < len(records) else None
            lp = self._run_layer(k, cfg, layer, consumer, offchip, cur, batch, counters, half)
            counters.layers.append(lp)
            cur ^= 1
            if k + 1 < len(records):
                self.trace.append(10)

        # step 11
        self.trace.append(11)
        logits = self.act_bram.read(f"buf{cur}")
        if out_elem == BF16_BYTES:
            payload = (logits.astype("<f4").view("<u4") >> 16).astype("<u2").tobytes()
        else:
            payload = logits.astype("<f4").tobytes()
        counters.output_cycles = self.dma[0].transfer(Endpoint.ACTIVATIONS, Endpoint.OFFCHIP, len(payload))
        counters.dma_bytes["dma0_output"] = len(payload)
        offchip.write(res_off, payload)
        self.status = "done"
        self._read_status(counters)

        back = offchip.read(res_off, result_bytes)
        if out_elem == BF16_BYTES:
            result = bf16.from_bits(np.frombuffer(back, dtype="<u2")).reshape(batch, -1)
        else:
            result = np.frombuffer(back, dtype="<f4").astype(np.float32).reshape(batch, -1)
        counters.dma_bytes["dma1"] = self.dma[1].bytes_moved
        counters.dma_bytes["dma2"] = self.dma[2].bytes_moved
        spec = NetworkSpec(layer_specs)
        report = finish_report(spec, batch, counters, sim, self.energy, "cycle")
        return result, report

    # -- pieces --------------------------------------------------------------

    @staticmethod
    def _layer_specs(image, records) -> list[LayerSpec]:
        specs = []
        for rec in records:
            bn = read_bn(bytes(image), rec)
            specs.append(LayerSpec(rec.in_dim, rec.out_dim, rec.precision, bn[:, 0], bn[:, 1], bn[:, 2], bn[:, 3]))
        specs[-1].activation = "none"
        return specs

    def _write_act(self, buf: int, data: np.ndarray, nbytes: int, half: int):
        if nbytes > half:
            raise BramCapacityError(
                f"activations BRAM buffer holds {half} bytes, layer needs {nbytes}"
            )
        self.act_bram.write(f"buf{buf}", data, nbytes)

    def _run_layer(self, k, cfg, layer, consumer, offchip, cur, batch, counters, half) -> LayerPerf:
        sim = self.sim
        rec = cfg.record
        if cfg.mode is None:
            raise RuntimeError(f"layer {k} has no mode set")

        # step 3
        self.trace.append(3)
        wraw = offchip.read(rec.weight_offset, rec.weight_bytes)
        braw = offchip.read(rec.bn_offset, rec.bn_bytes)
        offchip_cycles = self.dma[0].transfer(Endpoint.OFFCHIP, Endpoint.WEIGHTS, rec.weight_bytes)
        offchip_cycles += self.dma[0].transfer(Endpoint.OFFCHIP, Endpoint.WEIGHTS, rec.bn_bytes)
        counters.dma_bytes["dma0_weights"] += rec.weight_bytes
        counters.dma_bytes["dma0_bn"] += rec.bn_bytes
        weights = np.frombuffer(wraw, dtype="<u2").astype(np.uint16).reshape(rec.weight_shape)
        self.weight_bram.free("layer")
        self.weight_bram.free("norm")
        self.weight_bram.write("layer", weights, rec.weight_bytes)
        self.weight_bram.write("norm", np.frombuffer(braw, dtype="<f4"), rec.bn_bytes)

        acts = self.act_bram.read(f"buf{cur}")
        sched = tile_layer(layer)
        partials, measured = self._step_tiles(cfg.mode, layer, weights, acts)

        load = stream = drain = 0
        out_groups = []
        t = 0
        for n in range(sched.n_tiles):
            self.psum.reset(batch, cfg.mode)
            for kt in range(sched.k_tiles):
                if t:
                    self.trace.append(8)
                # step 4
                self.trace.append(4)
                self.dma[1].transfer(Endpoint.WEIGHTS, Endpoint.ARRAY, TILE_WEIGHT_BYTES)
                l_, s_ = tile_timing(batch, sim, first_in_layer=(t == 0))
                load += l_
                stream += s_
                # step 5
                self.trace.append(5)
                # steps 6, 7
                self.trace.append(6)
                self.trace.append(7)
                accumulate_psums(partials[t], self.psum)
                t += 1
            # step 9
            self.trace.append(9)
            valid = min(ARRAY_DIM, layer.out_dim - n * ARRAY_DIM)
            cols = slice(n * ARRAY_DIM, n * ARRAY_DIM + valid)
            group = layer_postprocess(self.psum.values[:, :valid], layer, consumer, cols)
            gbytes = drain_group_bytes(valid, batch, consumer)
            drain += self.dma[2].transfer(Endpoint.PSUM, Endpoint.ACTIVATIONS, gbytes)
            out_groups.append(group)

        out = np.concatenate(out_groups, axis=1)
        self._write_act(cur ^ 1, out, batch * activation_row_bytes(layer.out_dim, consumer), half)
        self.act_bram.free(f"buf{cur}")

        return LayerPerf(
            index=k,
            precision=layer.precision.value,
            in_dim=layer.in_dim,
            out_dim=layer.out_dim,
            k_tiles=sched.k_tiles,
            n_tiles=sched.n_tiles,
            tiles=sched.count,
            weight_bytes=rec.weight_bytes,
            bn_bytes=rec.bn_bytes,
            offchip_cycles=offchip_cycles,
            exposed_offchip_cycles=offchip_cycles,
            load_cycles=load,
            stream_cycles=stream,
            drain_cycles=drain,
            compute_cycles=load + stream + drain,
            ops=layer_ops(layer, batch),
            utilization=0.0,
        )

    def _step_tiles(self, mode: Mode, layer: LayerSpec, weights: np.ndarray, acts: np.ndarray):
        """Step every tile of a layer on the array; returns partials in schedule order."""
        sched = tile_layer(layer)
        batch = acts.shape[0]
        if mode is Mode.FLOAT:
            a, w = padded_float_operands(layer, weights, acts)
            mask = None
        else:
            a, w, mask = padded_binary_operands(layer, weights, acts)
        a3 = a.reshape(batch, sched.k_tiles, ARRAY_DIM)
        order = [(n, kt) for n, kt in sched]
        per_chunk = max(1, self.sim.max_lane_elements // (batch * ARRAY_DIM))
        out_dtype = np.float32 if mode is Mode.FLOAT else np.int32
        partials = np.empty((len(order), batch, ARRAY_DIM), dtype=out_dtype)
        measured = None
        for start in range(0, len(order), per_chunk):
            chunk = order[start : start + per_chunk]
            ns = np.array([n for n, _ in chunk])
            ks = np.array([kt for _, kt in chunk])
            rows = ks[:, None] * ARRAY_DIM + np.arange(ARRAY_DIM)
            cols = ns[:, None] * ARRAY_DIM + np.arange(ARRAY_DIM)
            wt = w[rows[:, :, None], cols[:, None, :]]
            at = np.ascontiguousarray(a3[:, ks, :].transpose(1, 0, 2))
            mt = None
            if mask is not None:
                mt = np.broadcast_to(mask[rows][:, :, None], wt.shape).copy()
            array = SystolicArray(len(chunk), self.sim.psum_precision)
            array.load_weights(mode, wt, mt)
            partials[start : start + len(chunk)] = array.stream(at)
            measured = array.state.cycle
            if measured != tile_cycles(batch):
                raise AssertionError(f"stepped tile took {measured} cycles, expected {tile_cycles(batch)}")
        return partials, measured
