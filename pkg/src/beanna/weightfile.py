"""The ``BEAN`` weight container.

All fields little-endian::

    "BEAN"            4 bytes magic
    version           u16 (= 1)
    layer_count       u16
    per layer:
      precision       u8   0 = FLOAT, 1 = BINARY
      reserved        u8   0
      in_dim          u32
      out_dim         u32
      weights         FLOAT:  out_dim * in_dim bf16 patterns (u16), row per output neuron
                      BINARY: out_dim rows of ceil(in_dim/16) packed sign words (u16)
      norm params     out_dim * (gamma, beta, mean, var) float32, neuron-interleaved

The same bytes are the head of the simulator's off-chip memory image.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binary import n_words
from .network import LayerSpec, Network, NetworkSpec
from .systolic import Mode

MAGIC = b"BEAN"
VERSION = 1
_HEADER = struct.Struct("<4sHH")
_LAYER = struct.Struct("<BBII")


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class LayerRecord:
    precision: Mode
    in_dim: int
    out_dim: int
    weight_offset: int
    weight_bytes: int
    bn_offset: int
    bn_bytes: int

    @property
    def weight_shape(self):
        if self.precision is Mode.FLOAT:
            return (self.out_dim, self.in_dim)
        return (self.out_dim, n_words(self.in_dim))


def _need(data: bytes, offset: int, size: int, what: str):
    if offset + size > len(data):
        raise WeightFileError(
            f"truncated weight file: {what} needs bytes {offset}..{offset + size}, "
            f"file ends at {len(data)}"
        )


def layout(data: bytes) -> tuple[list[LayerRecord], int]:
    """Parse headers only; returns the layer records and the end offset."""
    _need(data, 0, _HEADER.size, "header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise WeightFileError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise WeightFileError(f"unsupported version {version} at offset 4")
    off = _HEADER.size
    records = []
    for k in range(count):
        _need(data, off, _LAYER.size, f"layer {k} header")
        code, reserved, in_dim, out_dim = _LAYER.unpack_from(data, off)
        try:
            precision = Mode.from_code(code)
        except ValueError:
            raise WeightFileError(f"layer {k}: unknown precision {code} at offset {off}") from None
        if reserved != 0:
            raise WeightFileError(f"layer {k}: reserved byte is {reserved} at offset {off + 1}")
        if in_dim < 1 or out_dim < 1:
            raise WeightFileError(f"layer {k}: empty dimension at offset {off + 2}")
        off += _LAYER.size
        if precision is Mode.FLOAT:
            wbytes = 2 * in_dim * out_dim
        else:
            wbytes = 2 * out_dim * n_words(in_dim)
        _need(data, off, wbytes, f"layer {k} weights")
        bn_off = off + wbytes
        bbytes = 16 * out_dim
        _need(data, bn_off, bbytes, f"layer {k} norm params")
        records.append(LayerRecord(precision, in_dim, out_dim, off, wbytes, bn_off, bbytes))
        off = bn_off + bbytes
    return records, off


def read_weights(data: bytes, rec: LayerRecord) -> np.ndarray:
    raw = np.frombuffer(data, dtype="<u2", count=rec.weight_bytes // 2, offset=rec.weight_offset)
    return raw.astype(np.uint16).reshape(rec.weight_shape)


def read_bn(data: bytes, rec: LayerRecord) -> np.ndarray:
    """``(out_dim, 4)`` float32: gamma, beta, mean, var per neuron."""
    raw = np.frombuffer(data, dtype="<f4", count=rec.bn_bytes // 4, offset=rec.bn_offset)
    return raw.astype(np.float32).reshape(rec.out_dim, 4)


def loads(data: bytes) -> Network:
    records, end = layout(data)
    if end != len(data):
        raise WeightFileError(f"{len(data) - end} trailing bytes after offset {end}")
    layers, weights = [], []
    for rec in records:
        bn = read_bn(data, rec)
        layers.append(
            LayerSpec(rec.in_dim, rec.out_dim, rec.precision, bn[:, 0], bn[:, 1], bn[:, 2], bn[:, 3])
        )
        weights.append(read_weights(data, rec))
    try:
        spec = NetworkSpec(layers)
        return Network(spec, weights)
    except ValueError as exc:
        raise WeightFileError(f"inconsistent network: {exc}") from None


def dumps(net: Network) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(net.spec.layers))]
    for layer, w in zip(net.spec.layers, net.weights):
        parts.append(_LAYER.pack(layer.precision.code, 0, layer.in_dim, layer.out_dim))
        parts.append(np.ascontiguousarray(w, dtype="<u2").tobytes())
        bn = np.stack([layer.gamma, layer.beta, layer.mean, layer.var], axis=1)
        parts.append(np.ascontiguousarray(bn, dtype="<f4").tobytes())
    return b"".join(parts)


def save(path: str | Path, net: Network):
    Path(path).write_bytes(dumps(net))


def load(path: str | Path) -> Network:
    return loads(Path(path).read_bytes())
