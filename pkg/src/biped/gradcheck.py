"""Finite-difference gradient suites over ops, layers and the whole model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import tiny_config
from .model import BiPedModel
from .objective import LossWeights, grid_ce, logcosh_loss, total_loss, weighted_bce
from .tensor import Tensor

TOLERANCE = 1e-3
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self):
        # kink skips may not hollow the check out
        return self.error < TOLERANCE and self.checked > 0 and self.skipped <= self.checked

    def line(self):
        status = "ok  " if self.passed else "FAIL"
        note = f" ({self.skipped} kink coords skipped)" if self.skipped else ""
        return f"{status} {self.name:<36} max rel err {self.error:.3e} over {self.checked} coords{note}"


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def _away_from(rng, shape, points, gap=0.05):
    """Random values kept at least ``gap`` from each kink in ``points``."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.sign(x[near] - p + 1e-12) * gap * 2
    return Tensor(x)


def _weighted(rng, fn):
    """Contract an output with fixed random weights so every entry matters."""
    cache = {}

    def f(*args):
        out = fn(*args)
        if "w" not in cache:
            cache["w"] = rng.normal(size=out.shape)
        return (out * cache["w"]).sum()

    return f


def _lift_conv_bias(stack, rng):
    # Zero biases put every empty patch exactly on the ReLU kink, where
    # central differences are meaningless; check at a generic point instead.
    for _, bias, _ in stack.layers:
        bias.data = rng.uniform(0.05, 0.3, bias.shape)


def op_cases(seed=0):
    """(name, f, inputs) triples; f takes the inputs and returns a scalar."""
    rng = np.random.default_rng(seed)
    r = lambda *s: _rand(rng, *s)  # noqa: E731
    cases = [
        ("add", T.add, [r(3, 4), r(4)]),
        ("sub", T.sub, [r(3, 1), r(1, 4)]),
        ("mul", T.mul, [r(2, 3, 4), r(3, 1)]),
        ("div", T.div, [r(3, 4), Tensor(rng.uniform(0.5, 2.0, (3, 4)))]),
        ("neg", T.neg, [r(5)]),
        ("matmul", T.matmul, [r(3, 4), r(4, 2)]),
        ("matmul_batched", T.matmul, [r(2, 3, 4), r(2, 4, 5)]),
        ("linear", T.linear, [r(2, 3, 4), r(5, 4), r(5)]),
        ("conv2d", lambda x, k, b: T.conv2d(x, k, b, 2), [r(2, 2, 9, 11), r(3, 2, 3, 3), r(3)]),
        ("conv2d_stride1", lambda x, k, b: T.conv2d(x, k, b, 1), [r(1, 1, 6, 7), r(2, 1, 3, 2), r(2)]),
        ("sigmoid", T.sigmoid, [Tensor(rng.uniform(-6, 6, (4, 3)))]),
        ("tanh", T.tanh, [Tensor(rng.uniform(-3, 3, (4, 3)))]),
        ("softsign", T.softsign, [Tensor(rng.uniform(-3, 3, (4, 3)))]),
        ("relu", T.relu, [_away_from(rng, (4, 3), [0.0])]),
        ("exp", T.exp, [r(4, 3)]),
        ("log", T.log, [Tensor(rng.uniform(0.2, 3.0, (4, 3)))]),
        ("logcosh", T.logcosh_elem, [Tensor(rng.uniform(-4, 4, (4, 3)))]),
        ("clip", lambda x: T.clip(x, -0.5, 0.5), [_away_from(rng, (4, 3), [-0.5, 0.5])]),
        ("softmax", lambda x: T.softmax(x, axis=1), [r(3, 5)]),
        ("softmax_axis0", lambda x: T.softmax(x, axis=0), [r(3, 5, 2)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        ("stack", lambda a, b: T.stack([a, b], axis=1), [r(2, 3), r(2, 3)]),
        ("getitem", lambda a: a[:, 1:3], [r(3, 4)]),
        ("getitem_repeat", lambda a: T._getitem(a, ([0, 0, 2], slice(None))), [r(3, 4)]),
        ("take_rows", lambda t: T.take_rows(t, np.array([[0, 2], [2, 1]])), [r(3, 4)]),
        ("pick", lambda x: T.pick(x, np.array([1, 0, 3])), [r(3, 4)]),
        ("sum_axis", lambda a: T.tensor_sum(a, axis=1), [r(3, 4, 2)]),
        ("mean_axes", lambda a: T.tensor_mean(a, axis=(0, 2), keepdims=True), [r(3, 4, 2)]),
        ("reshape", lambda a: T.reshape(a, (6, 2)), [r(3, 4)]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [r(3, 4, 2)]),
    ]
    return [(name, _weighted(rng, fn), xs) for name, fn, xs in cases]


def layer_cases(seed=0):
    rng = np.random.default_rng(seed)
    store = nn.ParameterStore()
    dense = nn.DenseLayer(store, "dense", 4, 3, rng, activation="tanh")
    embed = nn.EmbeddingTable(store, "embed", 6, 3, rng)
    lstm = nn.LSTMLayer(store, "lstm", 3, 4, rng)
    lstm_tanh = nn.LSTMLayer(store, "lstm_tanh", 3, 4, rng, activation="tanh")
    conv = nn.ConvStack(store, "conv", rng)
    _lift_conv_bias(conv, rng)
    iau = nn.AttentionUnit(store, "iau", 5, 3, rng)
    x_seq = _rand(rng, 2, 4, 3)
    h0, c0 = _rand(rng, 2, 4), _rand(rng, 2, 4)
    images = Tensor((rng.random((3, 1, 23, 23)) < 0.4).astype(float))
    cat_rep = _rand(rng, 2, 4, 5)
    grid_idx = rng.integers(0, 6, size=(2, 4))
    boxes_t = _rand(rng, 2, 3, 4)
    probs_t = rng.uniform(0.1, 0.9, 5)
    labels = np.array([1, 0, 1, 1, 0])
    dist_logits = _rand(rng, 4, 6)
    grid_labels = np.array([0, 5, 2, 2])

    cases = [
        ("dense", lambda x, *_: dense(x), [_rand(rng, 2, 4)] + [dense.weight, dense.bias]),
        ("embedding", lambda *_: embed(grid_idx), [embed.table]),
        ("lstm_step", lambda x, h, c: T.concat(list(lstm.step(x, h, c)), axis=1),
         [_rand(rng, 2, 3), h0, c0]),
        ("lstm_sequence", lambda x, h, c, *_: lstm.forward(x, h, c), [x_seq, h0, c0, lstm.W, lstm.U, lstm.b]),
        ("lstm_sequence_tanh", lambda x, *_: lstm_tanh.forward(x), [x_seq, lstm_tanh.W, lstm_tanh.U, lstm_tanh.b]),
        ("conv_stack", lambda *_: conv(images), [w for w, _, _ in conv.layers] + [b for _, b, _ in conv.layers]),
        ("attention", lambda x, *_: iau(x)[0], [cat_rep, iau.W_a, iau.W_c]),
        ("attention_weights", lambda x, *_: iau(x)[1], [cat_rep, iau.W_a]),
    ]
    out = [(name, _weighted(rng, fn), xs) for name, fn, xs in cases]
    target = rng.uniform(-1, 1, (2, 3, 4))
    out += [
        ("logcosh_loss", lambda p: logcosh_loss(p, target), [boxes_t]),
        ("weighted_bce", lambda p: weighted_bce(p, labels, 2.5), [Tensor(probs_t)]),
        ("grid_ce", lambda z: grid_ce(T.softmax(z, axis=1), grid_labels), [dist_logits]),
    ]
    return out


def _check_case(name, f, inputs, coords_per_input=None, rng=None):
    """Check each input in turn while the others are held fixed."""
    worst, checked, skipped = 0.0, 0, 0
    for i, x in enumerate(inputs):
        def g(xi, i=i):
            args = list(inputs)
            args[i] = xi
            return f(*args)

        coords = None
        if coords_per_input is not None and x.size > coords_per_input:
            coords = np.sort(rng.choice(x.size, coords_per_input, replace=False))
        rep = T.grad_check_report(g, x, EPS, coords)
        worst = max(worst, rep.error)
        checked += rep.checked
        skipped += rep.skipped
    return worst, checked, skipped


def run_cases(cases, coords_per_input=None, seed=0):
    rng = np.random.default_rng(seed)
    results = []
    for name, f, inputs in cases:
        t0 = time.perf_counter()
        err, checked, skipped = _check_case(name, f, inputs, coords_per_input, rng)
        results.append(CheckResult(name, err, time.perf_counter() - t0, checked, skipped))
    return results


def model_problem(seed=0, batch=2, config=None, **overrides):
    """Tiny BiPed model, a random batch and its loss closure."""
    # small sparse maps keep most relu inputs away from zero
    overrides = {"map_height": 23, "map_width": 23, **overrides}
    config = config or tiny_config(**overrides)
    rng = np.random.default_rng(seed)
    model = BiPedModel(config, seed=seed)
    if config.use_cim:
        _lift_conv_bias(model.conv, rng)
    m, tau = config.obs_len, config.pred_len
    w, h = config.image_width, config.image_height
    start = rng.uniform([200, 200], [w - 400, h - 400], size=(batch, 2))
    size = rng.uniform([40, 80], [120, 300], size=(batch, 2))
    steps = np.arange(m + tau)[None, :, None] * rng.uniform(-6, 6, size=(batch, 1, 2))
    tl = start[:, None, :] + steps
    track = np.concatenate([tl, tl + size[:, None, :]], axis=2)

    class _S:
        pass

    samples = []
    for b in range(batch):
        s = _S()
        s.boxes, s.future_boxes = track[b, :m], track[b, m:]
        s.ego = rng.uniform(0, 10, (m, 3))
        s.future_ego = rng.uniform(0, 10, (tau, 3))
        s.crossing = b % 2
        samples.append(s)
    maps = None
    if config.use_cim:
        maps = (rng.random((batch, m, 5, config.map_height, config.map_width)) < 0.05).astype(float)
    data, targets = model.make_batch(samples, maps)

    def loss():
        return total_loss(model.forward(data), targets, LossWeights(), model, pos_weight=1.5).total

    return model, loss


def model_results(seed=0, coords_per_param=6, **overrides):
    """Check every parameter tensor of the tiny model on sampled coordinates."""
    model, loss = model_problem(seed, **overrides)
    rng = np.random.default_rng(seed + 1)
    results = []
    for name, p in model.params.items():
        t0 = time.perf_counter()
        coords = None
        if coords_per_param is not None and p.size > coords_per_param:
            coords = np.sort(rng.choice(p.size, coords_per_param, replace=False))
        rep = T.grad_check_report(lambda _: loss(), p, EPS, coords)
        results.append(CheckResult(f"model:{name}", rep.error, time.perf_counter() - t0, rep.checked, rep.skipped))
    return results


def run_scope(scope, seed=0):
    if scope == "ops":
        return run_cases(op_cases(seed), seed=seed)
    if scope == "layers":
        return run_cases(layer_cases(seed), coords_per_input=40, seed=seed)
    if scope == "model":
        return model_results(seed, coords_per_param=None)
    raise ValueError(f"unknown gradcheck scope {scope!r}")
