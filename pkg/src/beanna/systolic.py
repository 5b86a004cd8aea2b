"""Cycle-stepped model of the 16x16 weight-stationary dual-mode array.

Geometry: PE(r, c) holds the weight for inner index ``r`` and output column
``c``. Activations enter at the left edge of row ``r`` delayed by ``r``
cycles and move one column right per cycle; partial sums move one row down
per cycle and leave the bottom row into the accumulator interface.

In FLOAT mode each PE does ``psum + w*a`` in bfloat16 (multiplier and adder
round separately). In BINARY mode each PE holds a 16-bit word of ±1 weights
and adds ``2*popcount(xnor(w, a)) - 16`` to an integer partial sum, so the
array behaves as a 256x16 binary array.

Every array carries a leading *lane* axis. A lane is one independent tile
occupancy of the physical array; stepping several lanes in lockstep is
equivalent to running those tiles back to back (the array is reset between
tiles), and cycle counts are reported per tile.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import bf16
from .binary import word_contribution

ARRAY_DIM = 16
WEIGHT_LOAD_CYCLES = 16  # one array row per cycle
SKEW_CYCLES = ARRAY_DIM - 1
DRAIN_CYCLES = ARRAY_DIM
TILE_OVERHEAD_CYCLES = SKEW_CYCLES + DRAIN_CYCLES


class Mode(Enum):
    FLOAT = "float"
    BINARY = "binary"

    @property
    def inner_dim(self) -> int:
        """Inner-dimension elements covered by one tile."""
        return ARRAY_DIM if self is Mode.FLOAT else ARRAY_DIM * 16

    @property
    def code(self) -> int:
        return 0 if self is Mode.FLOAT else 1

    @classmethod
    def from_code(cls, code: int) -> Mode:
        try:
            return (cls.FLOAT, cls.BINARY)[code]
        except IndexError:
            raise ValueError(f"unknown precision code {code}") from None


class ArrayBusyError(RuntimeError):
    pass


class TileShapeError(ValueError):
    pass


def peak_ops_per_cycle(mode: Mode) -> int:
    """Peak ops per clock, counting multiplies and adds.

    FLOAT: 256 PE multiplies + 256 PE adds + 16 accumulator adds.
    BINARY: 256 PEs x (16 XNORs + 16 add-equivalents) + 16 accumulator adds.
    """
    pes = ARRAY_DIM * ARRAY_DIM
    if mode is Mode.FLOAT:
        return 2 * pes + ARRAY_DIM
    return pes * 2 * 16 + ARRAY_DIM


def tile_cycles(
    batch: int,
    weight_load: int = WEIGHT_LOAD_CYCLES,
    overhead: int = TILE_OVERHEAD_CYCLES,
) -> int:
    return weight_load + batch + overhead


@dataclass
class TileJob:
    """One weight tile plus the activation rows streamed against it.

    FLOAT: ``weights`` is (16, 16) float32 [inner, out], ``activations`` is
    (B, 16) float32; all values bfloat16-exact.
    BINARY: ``weights[r, c]`` is the uint16 word holding inner elements
    ``16r .. 16r+15`` of output column ``c``; ``activations`` is (B, 16)
    uint16, i.e. one 256-element packed row per batch sample. ``mask`` marks
    valid inner bits per PE (padding contributes nothing).
    """

    mode: Mode
    weights: np.ndarray
    activations: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        dtype = np.float32 if self.mode is Mode.FLOAT else np.uint16
        self.weights = np.asarray(self.weights)
        self.activations = np.asarray(self.activations)
        if self.weights.shape != (ARRAY_DIM, ARRAY_DIM):
            raise TileShapeError(f"weight tile must be 16x16, got {self.weights.shape}")
        if self.activations.ndim != 2 or self.activations.shape[1] != ARRAY_DIM:
            raise TileShapeError(f"activation tile must be Bx16, got {self.activations.shape}")
        if self.activations.shape[0] < 1:
            raise TileShapeError("activation tile needs at least one row")
        if self.weights.dtype != dtype or self.activations.dtype != dtype:
            raise TileShapeError(f"{self.mode.value} tiles hold {np.dtype(dtype).name} data")
        if self.mode is Mode.BINARY:
            if self.mask is None:
                self.mask = np.full((ARRAY_DIM, ARRAY_DIM), 0xFFFF, np.uint16)
            self.mask = np.asarray(self.mask, dtype=np.uint16)
            if self.mask.shape != (ARRAY_DIM, ARRAY_DIM):
                raise TileShapeError("mask must be 16x16")
        elif self.mask is not None:
            raise TileShapeError("FLOAT tiles are zero-padded, not masked")

    @property
    def batch(self) -> int:
        return self.activations.shape[0]


def _zeros(lanes, dtype):
    return np.zeros((lanes, ARRAY_DIM, ARRAY_DIM), dtype=dtype)


@dataclass
class ArrayState:
    """Registers of every PE, per lane, plus the shared cycle counter."""

    lanes: int
    mode: Mode = Mode.FLOAT
    cycle: int = 0
    weight_f: np.ndarray = None
    weight_b: np.ndarray = None
    mask_b: np.ndarray = None
    act_f: np.ndarray = None
    act_b: np.ndarray = None
    psum_f: np.ndarray = None
    psum_b: np.ndarray = None
    valid: np.ndarray = None
    loaded: bool = False
    busy: bool = False

    def __post_init__(self):
        for name, dtype in (
            ("weight_f", np.float32),
            ("weight_b", np.uint16),
            ("mask_b", np.uint16),
            ("act_f", np.float32),
            ("act_b", np.uint16),
            ("psum_f", np.float32),
            ("psum_b", np.int32),
            ("valid", bool),
        ):
            if getattr(self, name) is None:
                setattr(self, name, _zeros(self.lanes, dtype))

    def copy(self) -> ArrayState:
        return copy.deepcopy(self)

    def same_as(self, other: ArrayState) -> bool:
        arrays = ("weight_f", "weight_b", "mask_b", "act_f", "act_b", "psum_f", "psum_b", "valid")
        return (
            self.mode is other.mode
            and self.cycle == other.cycle
            and all(
                np.array_equal(getattr(self, a).view(np.uint8), getattr(other, a).view(np.uint8))
                for a in arrays
            )
        )


@dataclass
class _Stream:
    activations: np.ndarray  # (L, B, 16)
    outputs: np.ndarray  # (L, B, 16)
    n: int = 0

    @property
    def batch(self):
        return self.activations.shape[1]

    @property
    def length(self):
        return self.batch + TILE_OVERHEAD_CYCLES


class SystolicArray:
    """The 16x16 array, stepped one clock at a time.

    ``psum_precision`` selects how FLOAT partial sums are rounded on their
    way down a column: ``"bf16"`` (the PE adder) or ``"fp32"``.
    """

    def __init__(self, lanes: int = 1, psum_precision: str = "bf16"):
        if psum_precision not in ("bf16", "fp32"):
            raise ValueError(f"psum_precision must be 'bf16' or 'fp32', not {psum_precision!r}")
        self.psum_precision = psum_precision
        self.state = ArrayState(lanes)
        self._stream: _Stream | None = None
        self.exits = 0

    @property
    def lanes(self) -> int:
        return self.state.lanes

    def load_weights(self, mode: Mode, weights: np.ndarray, mask: np.ndarray | None = None):
        """Write stationary weights, one array row per cycle (16 cycles)."""
        st = self.state
        if st.busy:
            raise ArrayBusyError("cannot load weights while activations are in flight")
        weights = np.asarray(weights)
        if weights.shape != (st.lanes, ARRAY_DIM, ARRAY_DIM):
            raise TileShapeError(f"expected ({st.lanes}, 16, 16) weights, got {weights.shape}")
        if mode is Mode.BINARY and weights.dtype != np.uint16:
            raise TileShapeError("BINARY weights are uint16 words")
        if mode is Mode.FLOAT and weights.dtype != np.float32:
            raise TileShapeError("FLOAT weights are float32 (bf16-exact)")
        if mask is None:
            mask = np.full_like(st.mask_b, 0xFFFF)
        st.mode = mode
        # the idle datapath is tied off
        st.weight_f[:] = 0
        st.weight_b[:] = 0
        st.mask_b[:] = 0
        for row in range(ARRAY_DIM):
            if mode is Mode.FLOAT:
                st.weight_f[:, row] = weights[:, row]
            else:
                st.weight_b[:, row] = weights[:, row]
                st.mask_b[:, row] = mask[:, row]
            st.cycle += 1
        st.loaded = True

    def read_weights(self) -> np.ndarray:
        st = self.state
        return (st.weight_f if st.mode is Mode.FLOAT else st.weight_b).copy()

    def begin_stream(self, activations: np.ndarray):
        st = self.state
        if not st.loaded:
            raise RuntimeError("load weights before streaming")
        if st.busy:
            raise ArrayBusyError("a stream is already in flight")
        activations = np.asarray(activations)
        if activations.ndim != 3 or activations.shape[0] != st.lanes or activations.shape[2] != ARRAY_DIM:
            raise TileShapeError(f"expected ({st.lanes}, B, 16) activations, got {activations.shape}")
        dtype = np.float32 if st.mode is Mode.FLOAT else np.int32
        outputs = np.zeros(activations.shape, dtype=dtype)
        self._stream = _Stream(activations, outputs)
        st.busy = True

    def step(self):
        """Advance one clock.

        Bottom-row sums registered last cycle are captured by the accumulator
        interface, then every PE consumes its staged inputs.
        """
        st = self.state
        s = self._stream
        dim = ARRAY_DIM
        cols = np.arange(dim)
        rows = np.arange(dim)

        if s is not None:
            # capture: column c delivers batch row n - 16 - c
            b_out = s.n - dim - cols
            ok = (b_out >= 0) & (b_out < s.batch)
            if ok.any():
                bottom = st.psum_f if st.mode is Mode.FLOAT else st.psum_b
                s.outputs[:, b_out[ok], cols[ok]] = bottom[:, dim - 1, cols[ok]]
                self.exits += int(ok.sum())

        # skewed left-edge injection: row r sees batch row n - r
        edge_valid = np.zeros(dim, dtype=bool)
        if s is not None:
            b_in = s.n - rows
            edge_valid = (b_in >= 0) & (b_in < s.batch)
            b_clip = np.clip(b_in, 0, s.batch - 1)
            edge = s.activations[:, b_clip, rows]
            edge = np.where(edge_valid, edge, 0).astype(s.activations.dtype)

        valid = np.empty_like(st.valid)
        valid[:, :, 1:] = st.valid[:, :, :-1]
        valid[:, :, 0] = edge_valid

        if st.mode is Mode.FLOAT:
            act = np.empty_like(st.act_f)
            act[:, :, 1:] = st.act_f[:, :, :-1]
            act[:, :, 0] = edge if s is not None else 0
            psum_in = np.zeros_like(st.psum_f)
            psum_in[:, 1:] = st.psum_f[:, :-1]
            prod = bf16.mul_array(st.weight_f, act)
            if self.psum_precision == "bf16":
                total = bf16.add_array(psum_in, prod)
            else:
                with np.errstate(all="ignore"):
                    total = psum_in + prod
            st.act_f = np.where(valid, act, np.float32(0))
            st.psum_f = np.where(valid, total, np.float32(0))
        else:
            act = np.empty_like(st.act_b)
            act[:, :, 1:] = st.act_b[:, :, :-1]
            act[:, :, 0] = edge if s is not None else 0
            psum_in = np.zeros_like(st.psum_b)
            psum_in[:, 1:] = st.psum_b[:, :-1]
            total = psum_in + word_contribution(st.weight_b, act, st.mask_b)
            st.act_b = np.where(valid, act, np.uint16(0))
            st.psum_b = np.where(valid, total, np.int32(0))

        st.valid = valid
        st.cycle += 1
        if s is not None:
            s.n += 1

    def finish_stream(self) -> np.ndarray:
        s = self._stream
        if s is None:
            raise RuntimeError("no stream in flight")
        if s.n < s.length or self.state.valid.any():
            raise ArrayBusyError("stream has not drained")
        self._stream = None
        self.state.busy = False
        return s.outputs

    def stream(self, activations: np.ndarray, trace: list | None = None) -> np.ndarray:
        """Stream activations through the loaded weights until fully drained."""
        self.begin_stream(activations)
        for _ in range(self._stream.length):
            self.step()
            if trace is not None:
                trace.append(self.state.copy())
        return self.finish_stream()

    def reset(self):
        if self.state.busy:
            raise ArrayBusyError("cannot reset mid-stream")
        self.state = ArrayState(self.lanes, cycle=self.state.cycle)


def run_tiles(
    mode: Mode,
    weights: np.ndarray,
    activations: np.ndarray,
    mask: np.ndarray | None = None,
    psum_precision: str = "bf16",
) -> tuple[np.ndarray, int]:
    """Run L independent tiles in lockstep lanes.

    Returns ``(partials[L, B, 16], cycles_per_tile)``.
    """
    lanes = weights.shape[0]
    array = SystolicArray(lanes, psum_precision)
    array.load_weights(mode, weights, mask)
    partials = array.stream(activations)
    return partials, array.state.cycle


def run_tile(job: TileJob, psum_precision: str = "bf16", trace: list | None = None):
    """Run one tile job; returns ``(partials[B, 16], cycles)``."""
    array = SystolicArray(1, psum_precision)
    mask = None if job.mask is None else job.mask[None]
    array.load_weights(job.mode, job.weights[None], mask)
    partials = array.stream(job.activations[None], trace)
    return partials[0], array.state.cycle
