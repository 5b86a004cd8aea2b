"""Fully connected network description, block tiling and the inference driver.

Data carried between layers:

* into a FLOAT layer: float32 arrays of bfloat16-exact values, ``(B, in_dim)``
* into a BINARY layer: packed sign words, ``(B, ceil(in_dim / 16))`` uint16

Stored weights: FLOAT layers keep ``(out_dim, in_dim)`` bf16 bit patterns,
BINARY layers keep ``(out_dim, ceil(in_dim / 16))`` packed sign words.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bf16
from .binary import n_words, pack_signs, valid_mask, word_contribution
from .systolic import ARRAY_DIM, Mode

BN_EPS = np.float32(1e-5)

# Order of the activation and normalization units after each hidden layer.
POSTPROCESS_ORDER = ("hardtanh", "batchnorm")


class DimensionError(ValueError):
    pass


@dataclass
class LayerSpec:
    in_dim: int
    out_dim: int
    precision: Mode = Mode.FLOAT
    gamma: np.ndarray = None
    beta: np.ndarray = None
    mean: np.ndarray = None
    var: np.ndarray = None
    activation: str = "hardtanh"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimensionError("layer dimensions must be positive")
        if isinstance(self.precision, str):
            self.precision = Mode(self.precision)
        defaults = {"gamma": 1.0, "beta": 0.0, "mean": 0.0, "var": 1.0}
        for name, fill in defaults.items():
            value = getattr(self, name)
            if value is None:
                value = np.full(self.out_dim, fill, dtype=np.float32)
            value = np.asarray(value, dtype=np.float32)
            if value.shape != (self.out_dim,):
                raise DimensionError(f"{name} must have {self.out_dim} entries")
            setattr(self, name, value)
        if np.any(self.var < 0):
            raise ValueError("batch-norm variance must be non-negative")
        if self.activation not in ("hardtanh", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def weight_shape(self) -> tuple[int, int]:
        if self.precision is Mode.FLOAT:
            return (self.out_dim, self.in_dim)
        return (self.out_dim, n_words(self.in_dim))


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer chain broken: {a.out_dim} -> {b.in_dim}")
        if self.layers[0].precision is not Mode.FLOAT or self.layers[-1].precision is not Mode.FLOAT:
            raise ValueError("first and last layers must be FLOAT")
        for layer in self.layers[:-1]:
            if layer.activation != "hardtanh":
                raise ValueError("hidden layers use hardtanh")
        self.layers[-1].activation = "none"

    @classmethod
    def from_dims(cls, dims, precisions) -> NetworkSpec:
        precisions = [Mode(p) if isinstance(p, str) else p for p in precisions]
        if len(precisions) != len(dims) - 1:
            raise DimensionError("need one precision per weight layer")
        layers = [LayerSpec(i, o, p) for i, o, p in zip(dims, dims[1:], precisions)]
        layers[-1].activation = "none"
        return cls(layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def variant(self) -> str:
        return "hybrid" if any(l.precision is Mode.BINARY for l in self.layers) else "float"


REFERENCE_DIMS = [784, 1024, 1024, 1024, 10]


def reference_network(hybrid: bool) -> NetworkSpec:
    """The 784-1024-1024-1024-10 MLP, all-FLOAT or with binary hidden layers."""
    mid = Mode.BINARY if hybrid else Mode.FLOAT
    return NetworkSpec.from_dims(REFERENCE_DIMS, [Mode.FLOAT, mid, mid, Mode.FLOAT])


@dataclass
class Network:
    spec: NetworkSpec
    weights: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.spec.layers):
            raise DimensionError("one weight array per layer")
        for k, (layer, w) in enumerate(zip(self.spec.layers, self.weights)):
            w = np.asarray(w, dtype=np.uint16)
            if w.shape != layer.weight_shape:
                raise DimensionError(f"layer {k}: weights {w.shape}, expected {layer.weight_shape}")
            if layer.precision is Mode.BINARY and np.any(w & ~valid_mask(layer.in_dim)):
                raise ValueError(f"layer {k}: padding bits set in packed weights")
            self.weights[k] = w

    @classmethod
    def from_float(cls, spec: NetworkSpec, real_weights) -> Network:
        """Quantize real (out, in) matrices: bf16 for FLOAT, signs for BINARY."""
        out = []
        for layer, w in zip(spec.layers, real_weights):
            w = np.asarray(w, dtype=np.float32)
            out.append(bf16.to_bits(w) if layer.precision is Mode.FLOAT else pack_signs(w))
        return cls(spec, out)

    @classmethod
    def random(cls, spec: NetworkSpec, rng: np.random.Generator) -> Network:
        weights = []
        for layer in spec.layers:
            scale = 1.0 / math.sqrt(layer.in_dim)
            weights.append(rng.uniform(-scale, scale, (layer.out_dim, layer.in_dim)))
        return cls.from_float(spec, weights)


# --- tiling ----------------------------------------------------------------


@dataclass(frozen=True)
class TileSchedule:
    """Tiles of one layer, visited output-group major, inner tiles ascending."""

    mode: Mode
    in_dim: int
    out_dim: int
    k_tiles: int
    n_tiles: int
    pad_inner: int
    pad_outer: int

    @property
    def count(self) -> int:
        return self.k_tiles * self.n_tiles

    def __iter__(self):
        for n in range(self.n_tiles):
            for k in range(self.k_tiles):
                yield n, k


def tile_layer(layer: LayerSpec) -> TileSchedule:
    inner = layer.precision.inner_dim
    k = -(-layer.in_dim // inner)
    n = -(-layer.out_dim // ARRAY_DIM)
    return TileSchedule(
        layer.precision,
        layer.in_dim,
        layer.out_dim,
        k,
        n,
        pad_inner=k * inner - layer.in_dim,
        pad_outer=n * ARRAY_DIM - layer.out_dim,
    )


def padded_float_operands(layer: LayerSpec, weights: np.ndarray, acts: np.ndarray):
    """Zero-padded ``(B, K16)`` activations and ``(K16, N16)`` weights."""
    sched = tile_layer(layer)
    kp, np_ = sched.k_tiles * ARRAY_DIM, sched.n_tiles * ARRAY_DIM
    a = np.zeros((acts.shape[0], kp), np.float32)
    a[:, : layer.in_dim] = acts
    w = np.zeros((kp, np_), np.float32)
    w[: layer.in_dim, : layer.out_dim] = bf16.from_bits(weights).T
    return a, w


def padded_binary_operands(layer: LayerSpec, weights: np.ndarray, acts: np.ndarray):
    """Packed operands padded to whole tiles, plus per-word valid masks.

    Returns ``a (B, K*16 words)``, ``w (K*16 words, N16)``, ``mask (K*16,)``.
    """
    sched = tile_layer(layer)
    words = sched.k_tiles * ARRAY_DIM
    np_ = sched.n_tiles * ARRAY_DIM
    a = np.zeros((acts.shape[0], words), np.uint16)
    a[:, : acts.shape[1]] = acts
    w = np.zeros((words, np_), np.uint16)
    w[: weights.shape[1], : layer.out_dim] = weights.T
    mask = np.zeros(words, np.uint16)
    mask[: weights.shape[1]] = valid_mask(layer.in_dim)
    return a, w, mask


def accumulate_float(acc: np.ndarray, incoming: np.ndarray, psum_precision: str = "bf16") -> np.ndarray:
    if psum_precision == "bf16":
        return bf16.add_array(acc, incoming)
    with np.errstate(all="ignore"):
        return (acc + incoming).astype(np.float32)


def layer_matmul(layer: LayerSpec, weights: np.ndarray, acts: np.ndarray, psum_precision: str = "bf16"):
    """Reference tiled matmul with the array's accumulation order.

    Inside a tile the sum runs down array rows 0..15 from +0.0; tiles are
    then accumulated in ascending inner-tile order from +0.0. BINARY sums
    are exact integers so order does not matter.
    """
    sched = tile_layer(layer)
    b = acts.shape[0]
    if layer.precision is Mode.FLOAT:
        if acts.shape[1] != layer.in_dim:
            raise DimensionError(f"expected {layer.in_dim} inputs, got {acts.shape[1]}")
        a, w = padded_float_operands(layer, weights, acts)
        a3 = a.reshape(b, sched.k_tiles, ARRAY_DIM)
        w3 = w.reshape(sched.k_tiles, ARRAY_DIM, -1)
        part = np.zeros((b, sched.k_tiles, w.shape[1]), np.float32)
        for r in range(ARRAY_DIM):
            prod = bf16.mul_array(a3[:, :, r, None], w3[None, :, r, :])
            part = accumulate_float(part, prod, psum_precision)
        acc = np.zeros((b, w.shape[1]), np.float32)
        for k in range(sched.k_tiles):
            acc = accumulate_float(acc, part[:, k], psum_precision)
        return acc[:, : layer.out_dim]

    if acts.shape[1] != n_words(layer.in_dim):
        raise DimensionError(f"expected {n_words(layer.in_dim)} packed words, got {acts.shape[1]}")
    a, w, mask = padded_binary_operands(layer, weights, acts)
    s = np.zeros((b, w.shape[1]), np.int64)
    for j in range(a.shape[1]):
        if mask[j]:
            s += word_contribution(a[:, j, None], w[None, j, :], mask[j])
    s = s[:, : layer.out_dim]
    if np.any(np.abs(s) > layer.in_dim):
        raise AssertionError("binary sum exceeds layer fan-in")
    return s


# --- activation and normalization units ------------------------------------


def hardtanh(x):
    return np.clip(x, -1, 1)


def batchnorm_infer(x, layer: LayerSpec, neuron=None):
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` in single precision.

    With ``neuron`` given, ``x`` is that neuron's value(s); otherwise the
    last axis of ``x`` runs over neurons.
    """
    sl = slice(None) if neuron is None else neuron
    x = np.asarray(x, dtype=np.float32)
    g, bt, m, v = layer.gamma[sl], layer.beta[sl], layer.mean[sl], layer.var[sl]
    return (g * (x - m)) / np.sqrt(v + BN_EPS) + bt


_UNITS = {"hardtanh": lambda x, layer, cols: hardtanh(x), "batchnorm": batchnorm_infer}


def layer_postprocess(s, layer: LayerSpec, next_layer: LayerSpec | None, cols=None):
    """Turn accumulated sums into the next layer's input.

    Hidden layers pass through the units in ``POSTPROCESS_ORDER``; the result
    is then bf16-rounded for a FLOAT consumer or packed to signs for a
    BINARY consumer. The final layer returns raw logits. ``cols`` selects
    the neurons ``s`` covers when only one output group is passed.
    """
    x = np.asarray(s).astype(np.float32)
    if next_layer is None:
        return x
    for unit in POSTPROCESS_ORDER:
        x = _UNITS[unit](x, layer, cols).astype(np.float32)
    if next_layer.precision is Mode.BINARY:
        return pack_signs(x)
    return bf16.round_array(x)


def prepare_input(net: Network, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float32)
    if inputs.ndim != 2 or inputs.shape[1] != net.spec.layers[0].in_dim:
        raise DimensionError(f"inputs must be (B, {net.spec.layers[0].in_dim}), got {inputs.shape}")
    return bf16.round_array(inputs)


def forward_functional(net: Network, inputs: np.ndarray, psum_precision: str = "bf16") -> np.ndarray:
    x = prepare_input(net, inputs)
    layers = net.spec.layers
    for k, (layer, w) in enumerate(zip(layers, net.weights)):
        s = layer_matmul(layer, w, x, psum_precision)
        x = layer_postprocess(s, layer, layers[k + 1] if k + 1 < len(layers) else None)
    return x


def predict(logits: np.ndarray) -> np.ndarray:
    """Class index of the largest logit; ties go to the lowest index."""
    return np.argmax(logits, axis=-1)


@dataclass
class InferenceResult:
    logits: np.ndarray
    predictions: np.ndarray
    report: object = None
    trace: list = field(default_factory=list)


def run_inference(net: Network, inputs, mode: str = "functional", sim=None, energy=None) -> InferenceResult:
    """Evaluate ``net`` on a batch.

    ``mode="functional"`` computes values directly and estimates timing with
    the analytic model; ``mode="cycle"`` drives the stepped array through the
    memory-system dataflow. Both produce bit-identical logits.
    """
    from .config import EnergyConfig, SimConfig
    from .perf import estimate_perf

    sim = sim or SimConfig()
    energy = energy or EnergyConfig()
    if mode == "functional":
        logits = forward_functional(net, inputs, sim.psum_precision)
        report = estimate_perf(net.spec, len(logits), sim, energy)
        return InferenceResult(logits, predict(logits), report)
    if mode == "cycle":
        from .memory import Accelerator

        acc = Accelerator(sim, energy)
        logits, report = acc.execute_dataflow(net, inputs)
        return InferenceResult(logits, predict(logits), report, acc.trace)
    raise ValueError(f"mode must be 'functional' or 'cycle', not {mode!r}")
