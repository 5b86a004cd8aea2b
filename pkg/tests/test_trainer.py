import numpy as np
import pytest

from beanna.binary import binarize, xnor_popcount_dot
from beanna.config import TrainConfig
from beanna.mnist import find_mnist_dir, load_split
from beanna.network import run_inference
from beanna.systolic import Mode
from beanna.trainer import (
    AdamState,
    backward,
    cross_entropy,
    evaluate,
    export_weights,
    forward,
    init_shadow,
    optimizer_step,
    to_network,
    train,
)
from beanna.weightfile import dumps, loads

from surrogate import digits_surrogate


def _shadow(layers, prec, seed=0, dtype=np.float64):
    return init_shadow(layers, prec, np.random.default_rng(seed), dtype)


def test_binary_forward_equals_xnor_popcount():
    rng = np.random.default_rng(0)
    sh = _shadow([30, 37, 20, 4], ["float", "binary", "float"], dtype=np.float32)
    for _ in range(100):
        x = rng.uniform(0, 1, (3, 30)).astype(np.float32)
        caches, _ = forward(sh, x, momentum=None)
        c = caches[1]
        for b in range(3):
            i = binarize(c.pre_bin[b])
            for j in range(0, 20, 7):
                assert c.s[b, j] == xnor_popcount_dot(binarize(sh.weights[1][j]), i)


def test_all_positive_binary_sum_is_fan_in():
    sh = _shadow([8, 33, 5, 2], ["float", "binary", "float"])
    sh.weights[1][:] = 0.5
    sh.beta[0][:] = 3.0  # every post-norm value positive
    caches, _ = forward(sh, np.ones((4, 8)), momentum=None)
    assert np.all(caches[1].s == 33)


def test_float_forward_matches_straight_line():
    rng = np.random.default_rng(1)
    sh = _shadow([16, 8, 4], ["float", "float"])
    sh.gamma[0][:] = rng.uniform(0.5, 2, 8)
    sh.beta[0][:] = rng.normal(0, 1, 8)
    x = rng.normal(0, 1, (6, 16))
    _, logits = forward(sh, x, momentum=None)
    a = np.clip(x @ sh.weights[0].T, -1, 1)
    h = sh.gamma[0] * (a - a.mean(0)) / np.sqrt(a.var(0) + 1e-5) + sh.beta[0]
    assert np.allclose(logits, h @ sh.weights[1].T, rtol=1e-12, atol=1e-12)


def _loss(sh, x, y):
    _, logits = forward(sh, x, momentum=None)
    return cross_entropy(logits, y)[0]


def test_float_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    sh = _shadow([16, 8, 4], ["float", "float"], seed=2)
    sh.gamma[0][:] = rng.uniform(0.5, 1.5, 8)
    x = rng.normal(0, 0.5, (10, 16))
    y = rng.integers(0, 4, 10)
    caches, logits = forward(sh, x, momentum=None)
    grads = backward(sh, caches, cross_entropy(logits, y)[1])
    pairs = [(sh.weights[0], grads["weights"][0]), (sh.weights[1], grads["weights"][1]),
             (sh.gamma[0], grads["gamma"][0]), (sh.beta[0], grads["beta"][0])]
    eps = 1e-6
    checked = 0
    while checked < 100:
        p, g = pairs[rng.integers(len(pairs))]
        idx = tuple(rng.integers(0, n) for n in p.shape)
        old = p[idx]
        p[idx] = old + eps
        up = _loss(sh, x, y)
        p[idx] = old - eps
        down = _loss(sh, x, y)
        p[idx] = old
        num = (up - down) / (2 * eps)
        scale = max(abs(num), abs(g[idx]), 1e-6)
        assert abs(num - g[idx]) / scale < 1e-3, (idx, num, g[idx])
        checked += 1


def test_binary_weight_gradient_is_ds_times_sign_input():
    # one BINARY neuron fed by a 4-wide FLOAT layer; hand-set everything
    sh = _shadow([2, 4, 1, 2], ["float", "binary", "float"])
    sh.weights[0][:] = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], float) * 0.5
    sh.weights[1][:] = np.array([[0.3, -0.2, 0.1, -0.4]])
    sh.weights[2][:] = np.array([[1.0], [-1.0]])
    x = np.array([[1.0, 0.2], [-0.4, 0.8], [0.3, -0.9]])
    caches, logits = forward(sh, x, momentum=None)
    _, dl = cross_entropy(logits, np.array([0, 1, 0]))
    grads = backward(sh, caches, dl)
    # dL/ds for the binary layer by hand: back through the final matmul, BN, hardtanh
    c1 = caches[1]
    dh = dl @ sh.weights[2]
    dxhat = dh * sh.gamma[1]
    da = c1.inv_std * (dxhat - dxhat.mean(0) - c1.xhat * (dxhat * c1.xhat).mean(0))
    ds = da * (np.abs(c1.s) <= 1)
    sgn_i = np.where(c1.pre_bin >= 0, 1.0, -1.0)
    assert np.array_equal(grads["weights"][1], ds.T @ sgn_i)


def test_ste_window_blocks_outside_values():
    # binary layer last so the sign's gradient reaches layer 0's norm directly
    sh = _shadow([3, 4, 2], ["float", "binary"])
    caches, logits = forward(sh, np.array([[0.1, 0.2, 0.3], [0.3, -0.1, 0.2]]), momentum=None)
    caches[1].pre_bin[0, 0] = 2.0  # outside the window
    caches[1].pre_bin[1, 1] = -1.0  # on the boundary, passes
    caches[1].pre_bin[1, 2] = 0.5
    dl = np.ones_like(logits)
    grads = backward(sh, caches, dl)
    dinp = dl @ caches[1].w_eff
    mask = np.abs(caches[1].pre_bin) <= 1
    assert not mask[0, 0] and mask[1, 1] and mask[1, 2]
    assert np.allclose(grads["beta"][0], (dinp * mask).sum(0))
    assert grads["beta"][0][0] == pytest.approx(dinp[1, 0])


def test_optimizer_zero_grad_and_clip():
    cfg = TrainConfig()
    sh = _shadow([4, 3, 3, 2], ["float", "binary", "float"])
    before = [p.copy() for p in sh.params()]
    st = AdamState.zeros_like(sh)
    zeros = {"weights": [np.zeros_like(w) for w in sh.weights],
             "gamma": [np.zeros_like(g) for g in sh.gamma], "beta": [np.zeros_like(b) for b in sh.beta]}
    optimizer_step(sh, zeros, cfg, st)
    assert all(np.array_equal(a, b) for a, b in zip(before, sh.params()))

    # downhill direction points below the bound: the weight leaves 1.0
    sh.weights[1][0, 0] = 1.0
    g = {k: [np.zeros_like(a) for a in v] for k, v in zeros.items()}
    g["weights"][1][0, 0] = 0.5
    optimizer_step(sh, g, cfg, st)
    assert sh.weights[1][0, 0] < 1.0

    # a step that would land at 1.7 is stored as 1.0
    big = TrainConfig(learning_rate=1.0)
    sh.weights[1][0, 1] = 0.7
    g["weights"][1][:] = 0
    g["weights"][1][0, 1] = -1.0
    optimizer_step(sh, g, big, AdamState.zeros_like(sh))
    assert sh.weights[1][0, 1] == 1.0
    assert np.abs(sh.weights[1]).max() <= 1.0


def test_shape_mismatch_in_forward():
    sh = _shadow([4, 3, 2], ["float", "float"])
    with pytest.raises(ValueError):
        forward(sh, np.zeros((2, 5)))


@pytest.fixture(scope="module")
def surrogate():
    return digits_surrogate()


def test_training_is_deterministic(surrogate):
    tr, te = surrogate
    cfg = TrainConfig(layers=[784, 32, 32, 10], precision=["float", "binary", "float"], epochs=2,
                      batch_size=64, seed=5)
    a, b = train(cfg, tr, te), train(cfg, tr, te)
    assert a.curve == b.curve
    assert export_weights(a.shadow) == export_weights(b.shadow)
    cfg.workers = 2
    c, d = train(cfg, tr, te), train(cfg, tr, te)
    assert c.curve == d.curve


def test_training_learns_and_exports(surrogate):
    tr, te = surrogate
    for prec in (["float"] * 3, ["float", "binary", "float"]):
        cfg = TrainConfig(layers=[784, 64, 64, 10], precision=prec, epochs=6, batch_size=50)
        res = train(cfg, tr, te)
        assert res.accuracy > 0.7
        raw = export_weights(res.shadow)
        net = loads(raw)
        assert dumps(net) == raw
        assert [l.precision for l in net.spec.layers][1] is Mode(prec[1])
        # surrogate test set: 397 samples, one sample = 0.25 points
        quantized = np.mean(run_inference(net, te.images).predictions == te.labels)
        assert abs(quantized - evaluate(res.shadow, te.images, te.labels)) <= 0.015


def test_binary_master_weights_stay_clipped(surrogate):
    tr, te = surrogate
    cfg = TrainConfig(layers=[784, 32, 32, 10], precision=["float", "binary", "float"], epochs=1,
                      batch_size=32, learning_rate=0.05)
    res = train(cfg, tr, te)
    assert np.abs(res.shadow.weights[1]).max() <= 1.0


def test_export_quantization_robust_on_mnist():
    """Quantized inference stays within 0.5 points of the trainer's evaluation."""
    d = find_mnist_dir()
    if d is None:
        pytest.skip("MNIST files not present (set BEANNA_MNIST_DIR)")
    tr, te = load_split(d, True), load_split(d, False)
    cfg = TrainConfig(layers=[784, 256, 256, 256, 10], precision=["float", "binary", "binary", "float"],
                      epochs=3)
    res = train(cfg, tr, te)
    net = to_network(res.shadow)
    quantized = np.mean(run_inference(net, te.images).predictions == te.labels)
    assert abs(quantized - evaluate(res.shadow, te.images, te.labels)) < 0.005
