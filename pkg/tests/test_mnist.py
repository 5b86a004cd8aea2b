import gzip
import struct

import numpy as np
import pytest

from beanna.mnist import IdxError, find_mnist_dir, load_mnist, load_split, write_idx


def _files(tmp_path, n=5):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    write_idx(imgs, labels, tmp_path / "i", tmp_path / "l")
    return imgs, labels


def test_round_trip_and_scaling(tmp_path):
    imgs, labels = _files(tmp_path)
    ds = load_mnist(tmp_path / "i", tmp_path / "l")
    assert len(ds) == 5 and ds.images.shape == (5, 784)
    assert ds.images.dtype == np.float32 and 0 <= ds.images.min() and ds.images.max() <= 1
    assert np.array_equal((ds.images * 255).round().astype(np.uint8).reshape(5, 28, 28), imgs)
    assert np.array_equal(ds.labels, labels)


def test_header_counts(tmp_path):
    _files(tmp_path, 7)
    raw = (tmp_path / "i").read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 7, 28, 28)


def test_gzip_accepted(tmp_path):
    _files(tmp_path)
    (tmp_path / "i.gz").write_bytes(gzip.compress((tmp_path / "i").read_bytes()))
    assert len(load_mnist(tmp_path / "i.gz", tmp_path / "l")) == 5


def test_errors(tmp_path):
    _files(tmp_path)
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "bad").write_bytes(struct.pack(">I", 0x804) + raw[4:])
    with pytest.raises(IdxError, match="magic"):
        load_mnist(tmp_path / "bad", tmp_path / "l")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(IdxError, match="offset"):
        load_mnist(tmp_path / "short", tmp_path / "l")
    (tmp_path / "tiny").write_bytes(raw[:9])
    with pytest.raises(IdxError, match="offset 0"):
        load_mnist(tmp_path / "tiny", tmp_path / "l")
    write_idx(np.zeros((4, 28, 28), np.uint8), np.zeros(3, np.uint8), tmp_path / "i4", tmp_path / "l3")
    with pytest.raises(IdxError, match="4 images but 3 labels"):
        load_mnist(tmp_path / "i4", tmp_path / "l3")
    with pytest.raises(IdxError, match="magic"):
        load_mnist(tmp_path / "i", tmp_path / "i")


def test_directory_discovery(tmp_path, monkeypatch):
    z = np.zeros((2, 28, 28), np.uint8)
    y = np.zeros(2, np.uint8)
    write_idx(z, y, tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte")
    write_idx(z, y, tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte")
    monkeypatch.setenv("BEANNA_MNIST_DIR", str(tmp_path))
    assert find_mnist_dir() == tmp_path
    assert len(load_split(tmp_path, train=False)) == 2
    monkeypatch.setenv("BEANNA_MNIST_DIR", str(tmp_path / "nowhere"))
    monkeypatch.chdir(tmp_path)
    assert find_mnist_dir() is None
