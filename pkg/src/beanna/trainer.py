"""Numpy trainer for all-float and hybrid binary MLPs.

Each hidden layer computes ``s = I @ W.T`` then hardtanh then batch norm;
a BINARY layer uses ``sgn(W)`` and ``sgn(I)``. Gradients follow the
straight-through estimator:

* weight gradient of a BINARY layer is ``dL/ds^T @ sgn(I)``, applied to
  the real master weights, which are clipped to [-1, 1] after every step
* the sign applied to a BINARY layer's input passes gradient only where
  the pre-binarization value lies in [-1, 1]

The final layer has no activation or normalization and yields logits.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .mnist import MnistDataset
from .network import LayerSpec, Network, NetworkSpec, predict
from .systolic import Mode

log = logging.getLogger(__name__)

BN_EPS = 1e-5


def sgn(x):
    """Sign with sgn(0) = +1, matching the packed-bit convention."""
    return np.where(x >= 0, 1, -1).astype(x.dtype)


@dataclass
class ShadowWeights:
    """Real-valued master parameters of the network being trained."""

    precision: list
    weights: list  # (out, in) per layer
    gamma: list  # hidden layers only
    beta: list
    running_mean: list
    running_var: list

    @property
    def depth(self) -> int:
        return len(self.weights)

    def params(self) -> list:
        """Trainable arrays in a fixed order."""
        return list(self.weights) + list(self.gamma) + list(self.beta)

    def copy(self) -> ShadowWeights:
        return ShadowWeights(
            list(self.precision),
            [w.copy() for w in self.weights],
            [g.copy() for g in self.gamma],
            [b.copy() for b in self.beta],
            [m.copy() for m in self.running_mean],
            [v.copy() for v in self.running_var],
        )


def init_shadow(layers, precision, rng: np.random.Generator, dtype=np.float32) -> ShadowWeights:
    modes = [Mode(p) if isinstance(p, str) else p for p in precision]
    if len(modes) != len(layers) - 1:
        raise ValueError("need one precision per weight layer")
    weights = []
    for fan_in, fan_out in zip(layers, layers[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_out, fan_in)).astype(dtype))
    hidden = layers[1:-1]
    return ShadowWeights(
        modes,
        weights,
        [np.ones(n, dtype) for n in hidden],
        [np.zeros(n, dtype) for n in hidden],
        [np.zeros(n, dtype) for n in hidden],
        [np.ones(n, dtype) for n in hidden],
    )


@dataclass
class LayerCache:
    inp: np.ndarray  # layer input as used in the matmul (sgn'ed for BINARY)
    pre_bin: np.ndarray | None  # real value before sgn, BINARY layers only
    w_eff: np.ndarray
    s: np.ndarray | None = None
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None


def forward(shadow: ShadowWeights, x: np.ndarray, training: bool = True,
            momentum: float | None = 0.1):
    """Returns ``(caches, logits)``.

    In training mode batch statistics normalize and, when ``momentum`` is
    not None, update the running averages; otherwise running statistics are
    used.
    """
    h = np.asarray(x, dtype=shadow.weights[0].dtype)
    if h.ndim != 2 or h.shape[1] != shadow.weights[0].shape[1]:
        raise ValueError(f"expected (B, {shadow.weights[0].shape[1]}) inputs, got {h.shape}")
    caches = []
    last = shadow.depth - 1
    for k, (mode, w) in enumerate(zip(shadow.precision, shadow.weights)):
        if mode is Mode.BINARY:
            cache = LayerCache(sgn(h), h, sgn(w))
        else:
            cache = LayerCache(h, None, w)
        s = cache.inp @ cache.w_eff.T
        cache.s = s
        caches.append(cache)
        if k == last:
            return caches, s
        a = np.clip(s, -1, 1)
        if training:
            mu = a.mean(axis=0)
            var = a.var(axis=0)
            if momentum is not None:
                n = a.shape[0]
                unbiased = var * n / max(n - 1, 1)
                shadow.running_mean[k] *= 1 - momentum
                shadow.running_mean[k] += momentum * mu
                shadow.running_var[k] *= 1 - momentum
                shadow.running_var[k] += momentum * unbiased
        else:
            mu, var = shadow.running_mean[k], shadow.running_var[k]
        cache.inv_std = 1.0 / np.sqrt(var + BN_EPS)
        cache.xhat = (a - mu) * cache.inv_std
        h = shadow.gamma[k] * cache.xhat + shadow.beta[k]


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


def backward(shadow: ShadowWeights, caches, dlogits: np.ndarray) -> dict:
    """Gradients for ``weights``, ``gamma`` and ``beta`` (training-mode BN)."""
    depth = shadow.depth
    gw = [None] * depth
    gg = [None] * (depth - 1)
    gb = [None] * (depth - 1)
    ds = dlogits
    for k in range(depth - 1, -1, -1):
        c = caches[k]
        gw[k] = ds.T @ c.inp
        if k == 0:
            break
        dinp = ds @ c.w_eff
        if c.pre_bin is not None:
            dinp = dinp * (np.abs(c.pre_bin) <= 1)
        # previous layer's batch norm, then hardtanh
        p = caches[k - 1]
        gg[k - 1] = (dinp * p.xhat).sum(axis=0)
        gb[k - 1] = dinp.sum(axis=0)
        dxhat = dinp * shadow.gamma[k - 1]
        da = p.inv_std * (dxhat - dxhat.mean(axis=0) - p.xhat * (dxhat * p.xhat).mean(axis=0))
        ds = da * (np.abs(p.s) <= 1)
    return {"weights": gw, "gamma": gg, "beta": gb}


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, shadow: ShadowWeights) -> AdamState:
        return cls([np.zeros_like(p) for p in shadow.params()], [np.zeros_like(p) for p in shadow.params()])


def optimizer_step(shadow: ShadowWeights, grads: dict, cfg: TrainConfig, state: AdamState) -> ShadowWeights:
    """One Adam update in place, then clip BINARY master weights to [-1, 1]."""
    flat = list(grads["weights"]) + list(grads["gamma"]) + list(grads["beta"])
    params = shadow.params()
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p, g, m, v in zip(params, flat, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    for mode, w in zip(shadow.precision, shadow.weights):
        if mode is Mode.BINARY:
            np.clip(w, -1, 1, out=w)
    return shadow


def _shard_grads(shadow, x, y, momentum):
    caches, logits = forward(shadow, x, training=True, momentum=momentum)
    loss, dl = cross_entropy(logits, y)
    return loss, backward(shadow, caches, dl)


def train_step(shadow: ShadowWeights, x, y, cfg: TrainConfig, state: AdamState,
               pool: ThreadPoolExecutor | None = None) -> float:
    if pool is None or cfg.workers <= 1:
        loss, grads = _shard_grads(shadow, x, y, cfg.bn_momentum)
    else:
        # per-shard batch statistics; running stats follow shard 0 only
        shards = np.array_split(np.arange(len(y)), cfg.workers)
        shards = [s for s in shards if len(s)]
        futures = [
            pool.submit(_shard_grads, shadow, x[s], y[s], cfg.bn_momentum if i == 0 else None)
            for i, s in enumerate(shards)
        ]
        results = [f.result() for f in futures]  # fixed reduction order
        n = len(y)
        loss = sum(r[0] * len(s) for r, s in zip(results, shards)) / n
        grads = {}
        for key in ("weights", "gamma", "beta"):
            grads[key] = [
                sum(r[1][key][i] * (len(s) / n) for r, s in zip(results, shards))
                for i in range(len(results[0][1][key]))
            ]
    optimizer_step(shadow, grads, cfg, state)
    for mode, w in zip(shadow.precision, shadow.weights):
        assert mode is not Mode.BINARY or np.abs(w).max() <= 1.0
    return loss


def evaluate(shadow: ShadowWeights, images, labels, batch: int = 1000) -> float:
    """Accuracy in the trainer's own arithmetic, running BN statistics."""
    correct = 0
    for i in range(0, len(labels), batch):
        _, logits = forward(shadow, images[i : i + batch], training=False)
        correct += int((predict(logits) == labels[i : i + batch]).sum())
    return correct / len(labels)


@dataclass
class TrainResult:
    shadow: ShadowWeights
    curve: list = field(default_factory=list)  # (epoch, loss, test accuracy)

    @property
    def accuracy(self) -> float:
        return self.curve[-1][2] if self.curve else float("nan")


def train(cfg: TrainConfig, train_set: MnistDataset, test_set: MnistDataset,
          dtype=np.float32, callback=None) -> TrainResult:
    """Mini-batch Adam training; deterministic for a given seed and worker count."""
    if train_set.images.shape[1] != cfg.layers[0]:
        raise ValueError(f"dataset has {train_set.images.shape[1]} features, network expects {cfg.layers[0]}")
    rng = np.random.default_rng(cfg.seed)
    shadow = init_shadow(cfg.layers, cfg.precision, rng, dtype)
    state = AdamState.zeros_like(shadow)
    x_all = train_set.images.astype(dtype)
    y_all = train_set.labels.astype(np.int64)
    x_test = test_set.images.astype(dtype)
    y_test = test_set.labels.astype(np.int64)
    result = TrainResult(shadow)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(y_all))
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                if len(idx) < 2:
                    continue  # batch norm needs two samples
                losses.append(train_step(shadow, x_all[idx], y_all[idx], cfg, state, pool))
            acc = evaluate(shadow, x_test, y_test)
            result.curve.append((epoch, float(np.mean(losses)), acc))
            log.info("epoch %d loss %.4f test accuracy %.4f", epoch, np.mean(losses), acc)
            if callback:
                callback(epoch, result.curve[-1])
    finally:
        if pool:
            pool.shutdown()
    return result


def to_network(shadow: ShadowWeights) -> Network:
    """Quantize to the device formats: bf16 FLOAT weights, packed BINARY signs."""
    layers = []
    for k, (mode, w) in enumerate(zip(shadow.precision, shadow.weights)):
        out_dim, in_dim = w.shape
        if k < shadow.depth - 1:
            layers.append(
                LayerSpec(in_dim, out_dim, mode, shadow.gamma[k], shadow.beta[k],
                          shadow.running_mean[k], shadow.running_var[k])
            )
        else:
            layers.append(LayerSpec(in_dim, out_dim, mode, activation="none"))
    spec = NetworkSpec(layers)
    return Network.from_float(spec, [w.astype(np.float32) for w in shadow.weights])


def export_weights(shadow: ShadowWeights) -> bytes:
    from .weightfile import dumps

    return dumps(to_network(shadow))
