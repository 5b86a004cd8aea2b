"""A small MNIST-shaped stand-in built from scikit-learn's bundled digits.

8x8 images are upsampled to 28x28 and quantized to bytes; 1400 train and
397 test samples. Only used for smoke-level training checks.
"""

from __future__ import annotations

import numpy as np

from beanna.mnist import MnistDataset


def digits_surrogate(as_bytes: bool = False):
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = np.stack([zoom(im, 3.5, order=1) for im in d.images])
    imgs = (np.clip(imgs / 16, 0, 1) * 255).round().astype(np.uint8)
    labels = d.target.astype(np.uint8)
    if as_bytes:
        return (imgs[:1400], labels[:1400]), (imgs[1400:], labels[1400:])
    flat = imgs.reshape(len(imgs), -1).astype(np.float32) / np.float32(255)
    return MnistDataset(flat[:1400], labels[:1400]), MnistDataset(flat[1400:], labels[1400:])
