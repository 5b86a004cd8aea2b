"""MNIST IDX reader (plain or gzip-compressed files)."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
ENV_DIR = "BEANNA_MNIST_DIR"

# standard file stems; a ".gz" suffix is also accepted
TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IdxError(ValueError):
    pass


@dataclass
class MnistDataset:
    """Images as ``(N, 784)`` float32 in [0, 1], labels as ``(N,)`` uint8."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def _read(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx_images(data: bytes) -> np.ndarray:
    if len(data) < 16:
        raise IdxError(f"truncated image header: need 16 bytes at offset 0, have {len(data)}")
    magic, count, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IMAGE_MAGIC:
        raise IdxError(f"bad image magic 0x{magic:08x} at offset 0")
    need = 16 + count * rows * cols
    if len(data) < need:
        raise IdxError(f"truncated image data: expected {need} bytes, file ends at offset {len(data)}")
    return np.frombuffer(data, np.uint8, count * rows * cols, 16).reshape(count, rows, cols)


def parse_idx_labels(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise IdxError(f"truncated label header: need 8 bytes at offset 0, have {len(data)}")
    magic, count = struct.unpack_from(">II", data, 0)
    if magic != LABEL_MAGIC:
        raise IdxError(f"bad label magic 0x{magic:08x} at offset 0")
    if len(data) < 8 + count:
        raise IdxError(f"truncated label data: expected {8 + count} bytes, file ends at offset {len(data)}")
    labels = np.frombuffer(data, np.uint8, count, 8)
    if labels.size and labels.max() > 9:
        raise IdxError(f"label {labels.max()} out of range")
    return labels


def load_mnist(image_file, label_file) -> MnistDataset:
    images = parse_idx_images(_read(image_file))
    labels = parse_idx_labels(_read(label_file))
    if len(images) != len(labels):
        raise IdxError(f"{len(images)} images but {len(labels)} labels")
    flat = images.reshape(len(images), -1).astype(np.float32) / np.float32(255.0)
    return MnistDataset(flat, labels.copy())


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


def find_mnist_dir(candidates=()) -> Path | None:
    """First directory holding all four standard files, or ``None``."""
    dirs = [Path(c) for c in candidates]
    if os.environ.get(ENV_DIR):
        dirs.insert(0, Path(os.environ[ENV_DIR]))
    dirs.append(Path("data/mnist"))
    for d in dirs:
        if all(_find(d, stem) for stem in TRAIN_FILES + TEST_FILES):
            return d
    return None


def load_split(directory, train: bool) -> MnistDataset:
    directory = Path(directory)
    stems = TRAIN_FILES if train else TEST_FILES
    paths = [_find(directory, s) for s in stems]
    if None in paths:
        raise FileNotFoundError(f"MNIST files {stems} not found in {directory}")
    return load_mnist(*paths)


def write_idx(images: np.ndarray, labels: np.ndarray, image_file, label_file):
    """Write uint8 ``(N, rows, cols)`` images and labels as IDX files."""
    images = np.asarray(images, np.uint8)
    labels = np.asarray(labels, np.uint8)
    n, rows, cols = images.shape
    Path(image_file).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(label_file).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())
