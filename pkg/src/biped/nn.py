"""Neural building blocks on top of :mod:`biped.tensor`.

Weights follow the ``out x in`` convention. LSTM gate blocks are stacked in
the order input, forget, output, candidate.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, InputError
from .tensor import Tensor, _make

L2_COEF = 1e-4
SERIAL_MAGIC = b"BIPED1"

_ACTIVATIONS = {
    None: lambda x: x,
    "linear": lambda x: x,
    "softsign": T.softsign,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "relu": T.relu,
}


def glorot_uniform(rng, shape, fan_in, fan_out):
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class ParameterStore:
    """Ordered named trainable tensors plus the set that carries L2 penalty."""

    def __init__(self):
        self._params = OrderedDict()
        self._l2 = []

    def add(self, name, value, l2=False):
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        if l2:
            self._l2.append(name)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    @property
    def l2_names(self):
        return list(self._l2)

    def count(self):
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def l2_penalty(self, coef=L2_COEF):
        total = None
        for name in self._l2:
            w = self._params[name]
            term = (w * w).sum()
            total = term if total is None else total + term
        if total is None:
            return Tensor(0.0)
        return total * coef

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise InputError(
                f"parameter sets differ: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for k, v in state.items():
            p = self._params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise DimensionError(f"parameter {k!r}: shape {v.shape} != {p.shape}")
            p.data = v.copy()

    def save(self, path):
        save_arrays(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(load_arrays(path))


def save_arrays(path, arrays):
    """Write named float64 arrays in the ``BIPED1`` container format.

    Layout: magic ``BIPED1``, u32 count, then per array: u32 name length,
    UTF-8 name, u32 rank, u32 extents, little-endian f64 values (row-major).
    """
    with open(path, "wb") as fh:
        fh.write(SERIAL_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8", order="C")  # keeps rank 0
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:6] != SERIAL_MAGIC:
        raise InputError(f"{path}: missing BIPED1 header")
    pos = 6

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise InputError(f"{path}: truncated at byte {pos}, needed {n} more of {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise InputError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


class DenseLayer:
    def __init__(self, store, name, n_in, n_out, rng, activation=None, bias=True):
        self.weight = store.add(f"{name}.weight", glorot_uniform(rng, (n_out, n_in), n_in, n_out))
        self.bias = store.add(f"{name}.bias", np.zeros(n_out)) if bias else None
        self.activation = activation
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x):
        return _ACTIVATIONS[self.activation](T.linear(x, self.weight, self.bias))


class EmbeddingTable:
    def __init__(self, store, name, num_classes, dim, rng):
        self.table = store.add(f"{name}.table", glorot_uniform(rng, (num_classes, dim), num_classes, dim))
        self.num_classes, self.dim = num_classes, dim

    def __call__(self, indices):
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_classes):
            raise InputError(f"class index out of range [0, {self.num_classes})")
        return T.take_rows(self.table, idx)


def _act_np(name, x):
    if name == "tanh":
        y = np.tanh(x)
        return y, 1.0 - y * y
    if name == "softsign":
        d = 1.0 + np.abs(x)
        return x / d, 1.0 / (d * d)
    raise ContractError(f"unsupported LSTM cell activation {name!r}")


def _sig_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_sequence(xs, W, U, b, activation, h0=None, c0=None):
    """Run an LSTM over ``xs`` (B x steps x in) as one tape operation.

    Returns all hidden states (B x steps x hid). The backward pass is
    hand-written backpropagation through time; ``h0``/``c0`` may be
    tensors that receive gradients.
    """
    xs, W, U, b = T.as_tensor(xs), T.as_tensor(W), T.as_tensor(U), T.as_tensor(b)
    if xs.ndim != 3:
        raise DimensionError(f"lstm: expected B x steps x in input, got {xs.shape}")
    bsz, steps, n_in = xs.shape
    hid = U.shape[1]
    if steps < 1:
        raise ContractError("lstm: empty input sequence")
    if W.shape != (4 * hid, n_in) or U.shape != (4 * hid, hid) or b.shape != (4 * hid,):
        raise DimensionError(
            f"lstm: input {xs.shape} incompatible with W {W.shape}, U {U.shape}, b {b.shape}"
        )
    parents = [xs, W, U, b]
    h = np.zeros((bsz, hid))
    c = np.zeros((bsz, hid))
    if h0 is not None:
        h0 = T.as_tensor(h0)
        if h0.shape != (bsz, hid):
            raise DimensionError(f"lstm: initial hidden {h0.shape} != {(bsz, hid)}")
        h = h0.data.copy()
        parents.append(h0)
    if c0 is not None:
        c0 = T.as_tensor(c0)
        if c0.shape != (bsz, hid):
            raise DimensionError(f"lstm: initial cell {c0.shape} != {(bsz, hid)}")
        c = c0.data.copy()
        parents.append(c0)

    zx = xs.data @ W.data.T + b.data  # B x steps x 4h
    Ud = U.data
    H = np.empty((bsz, steps, hid))
    gates = np.empty((bsz, steps, 4 * hid))
    cells = np.empty((bsz, steps + 1, hid))
    hprev = np.empty((bsz, steps, hid))
    actc = np.empty((bsz, steps, hid))
    dactc = np.empty((bsz, steps, hid))
    dgs = np.empty((bsz, steps, hid))
    cells[:, 0] = c
    for t in range(steps):
        hprev[:, t] = h
        z = zx[:, t] + h @ Ud.T
        i = _sig_np(z[:, :hid])
        f = _sig_np(z[:, hid:2 * hid])
        o = _sig_np(z[:, 2 * hid:3 * hid])
        g, dg = _act_np(activation, z[:, 3 * hid:])
        c = f * c + i * g
        ac, dac = _act_np(activation, c)
        h = o * ac
        gates[:, t, :hid] = i
        gates[:, t, hid:2 * hid] = f
        gates[:, t, 2 * hid:3 * hid] = o
        gates[:, t, 3 * hid:] = g
        dactc[:, t] = dac
        actc[:, t] = ac
        dgs[:, t] = dg
        cells[:, t + 1] = c
        H[:, t] = h

    def grad_fn(gH):
        dz_all = np.empty((bsz, steps, 4 * hid))
        dh_next = np.zeros((bsz, hid))
        dc_next = np.zeros((bsz, hid))
        for t in range(steps - 1, -1, -1):
            i = gates[:, t, :hid]
            f = gates[:, t, hid:2 * hid]
            o = gates[:, t, 2 * hid:3 * hid]
            g = gates[:, t, 3 * hid:]
            dh = gH[:, t] + dh_next
            do = dh * actc[:, t]
            dc = dh * o * dactc[:, t] + dc_next
            dz = dz_all[:, t]
            dz[:, :hid] = dc * g * i * (1.0 - i)
            dz[:, hid:2 * hid] = dc * cells[:, t] * f * (1.0 - f)
            dz[:, 2 * hid:3 * hid] = do * o * (1.0 - o)
            dz[:, 3 * hid:] = dc * i * dgs[:, t]
            dc_next = dc * f
            dh_next = dz @ Ud
        flat_dz = dz_all.reshape(-1, 4 * hid)
        gx = dz_all @ W.data
        gW = flat_dz.T @ xs.data.reshape(-1, n_in)
        gU = flat_dz.T @ hprev.reshape(-1, hid)
        gb = flat_dz.sum(axis=0)
        out = [gx, gW, gU, gb]
        if h0 is not None:
            out.append(dh_next)
        if c0 is not None:
            out.append(dc_next)
        return tuple(out)

    return _make(H, tuple(parents), grad_fn, "lstm")


class LSTMLayer:
    """Single-layer LSTM with sigmoid gates and a configurable cell activation."""

    def __init__(self, store, name, n_in, hidden, rng, activation="softsign"):
        if activation not in ("softsign", "tanh"):
            raise ContractError(f"unsupported LSTM cell activation {activation!r}")
        w = np.concatenate([glorot_uniform(rng, (hidden, n_in), n_in, hidden) for _ in range(4)])
        u = np.concatenate([orthogonal(rng, hidden) for _ in range(4)])
        self.W = store.add(f"{name}.W", w, l2=True)
        self.U = store.add(f"{name}.U", u, l2=True)
        self.b = store.add(f"{name}.b", np.zeros(4 * hidden))
        self.n_in, self.hidden, self.activation = n_in, hidden, activation

    def _act(self, x):
        return T.softsign(x) if self.activation == "softsign" else T.tanh(x)

    def step(self, x, h, c):
        """One step built from primitive tape ops; x is (B x in) or (in,)."""
        x, h, c = T.as_tensor(x), T.as_tensor(h), T.as_tensor(c)
        if x.shape[-1] != self.n_in or h.shape[-1] != self.hidden or c.shape != h.shape:
            raise DimensionError(
                f"lstm_step: got x {x.shape}, h {h.shape}, c {c.shape} for "
                f"in={self.n_in}, hidden={self.hidden}"
            )
        n = self.hidden
        z = T.linear(x, self.W, self.b) + T.linear(h, self.U)
        i = T.sigmoid(z[..., :n])
        f = T.sigmoid(z[..., n:2 * n])
        o = T.sigmoid(z[..., 2 * n:3 * n])
        g = self._act(z[..., 3 * n:])
        c_new = f * c + i * g
        h_new = o * self._act(c_new)
        return h_new, c_new

    def forward(self, xs, h0=None, c0=None):
        """All hidden states for xs (B x steps x in, or steps x in)."""
        xs = T.as_tensor(xs)
        if xs.ndim == 2:
            return self.forward(xs.reshape(1, *xs.shape), h0, c0).reshape(xs.shape[0], self.hidden)
        if xs.ndim != 3 or xs.shape[-1] != self.n_in:
            raise DimensionError(f"lstm_forward: input {xs.shape} does not end in {self.n_in}")
        if xs.shape[1] < 1:
            raise ContractError("lstm_forward: empty sequence")
        return lstm_sequence(xs, self.W, self.U, self.b, self.activation, h0, c0)

    def forward_stepwise(self, xs, h0=None, c0=None):
        """Reference unrolled forward made of ``step`` calls."""
        xs = T.as_tensor(xs)
        bsz, steps, _ = xs.shape
        h = h0 if h0 is not None else Tensor(np.zeros((bsz, self.hidden)))
        c = c0 if c0 is not None else Tensor(np.zeros((bsz, self.hidden)))
        outs = []
        for t in range(steps):
            h, c = self.step(xs[:, t], h, c)
            outs.append(h)
        return T.stack(outs, axis=1)


def lstm_step(layer, x, h, c):
    return layer.step(x, h, c)


def lstm_forward(layer, xs):
    return layer.forward(xs)


class ConvStack:
    """Three ReLU conv layers followed by global average pooling.

    One parameter set, applied independently to every frame of every
    category.
    """

    def __init__(self, store, name, rng, channels=(8, 16, 32), kernels=(5, 5, 3), strides=(2, 2, 2)):
        self.layers = []
        cin = 1
        for k, (cout, ks, st) in enumerate(zip(channels, kernels, strides)):
            fan_in, fan_out = cin * ks * ks, cout * ks * ks
            w = store.add(f"{name}.conv{k}.kernel", glorot_uniform(rng, (cout, cin, ks, ks), fan_in, fan_out))
            b = store.add(f"{name}.conv{k}.bias", np.zeros(cout))
            self.layers.append((w, b, st))
            cin = cout
        self.out_dim = cin

    def output_hw(self, h, w):
        for kern, _, st in self.layers:
            ks = kern.shape[-1]
            if ks > h or ks > w:
                raise DimensionError(f"raster {h}x{w} too small for conv kernel {ks}")
            h, w = (h - ks) // st + 1, (w - ks) // st + 1
        return h, w

    def __call__(self, images, dedupe=True):
        """images: N x 1 x H x W -> N x out_dim.

        Constant inputs are deduplicated first: overlapping windows and
        empty category masks repeat the same raster many times, and the
        features of a repeated image are gathered rather than recomputed.
        """
        x = T.as_tensor(images)
        inverse = None
        if dedupe and not x.requires_grad and x.shape[0] > 1:
            seen, first = {}, []
            inverse = np.empty(x.shape[0], dtype=np.int64)
            for i, img in enumerate(x.data):
                key = img.tobytes()
                if key not in seen:
                    seen[key] = len(first)
                    first.append(i)
                inverse[i] = seen[key]
            if len(first) < x.shape[0]:
                x = T.Tensor(x.data[first])
            else:
                inverse = None
        for kern, bias, st in self.layers:
            x = T.relu(T.conv2d(x, kern, bias, st))
        feats = x.mean(axis=(2, 3))
        return feats if inverse is None else T.take_rows(feats, inverse.reshape(-1))


def conv_encode_category(stack, maps, expected_hw=None):
    """Per-frame conv features: maps (m x 1 x H x W) -> m x feat."""
    maps = T.as_tensor(maps)
    if maps.ndim != 4 or maps.shape[1] != 1:
        raise DimensionError(f"category maps must be m x 1 x H x W, got {maps.shape}")
    if expected_hw is not None and tuple(maps.shape[2:]) != tuple(expected_hw):
        raise DimensionError(f"category maps are {maps.shape[2:]}, expected {tuple(expected_hw)}")
    return stack(maps)


class AttentionUnit:
    """Last-step bilinear attention over a sequence, then tanh projection."""

    def __init__(self, store, name, f, q, rng):
        self.W_a = store.add(f"{name}.W_a", glorot_uniform(rng, (f, f), f, f))
        self.W_c = store.add(f"{name}.W_c", glorot_uniform(rng, (q, 2 * f), 2 * f, q))
        self.f, self.q = f, q

    def __call__(self, cat_rep):
        """cat_rep: B x m x f -> (C_int: B x q, alpha: B x m)."""
        cat_rep = T.as_tensor(cat_rep)
        if cat_rep.ndim == 2:
            out, alpha = self(cat_rep.reshape(1, *cat_rep.shape))
            return out.reshape(self.q), alpha.reshape(cat_rep.shape[0])
        if cat_rep.shape[-1] != self.f or cat_rep.shape[1] < 1:
            raise DimensionError(f"iau: input {cat_rep.shape} does not match f={self.f}")
        h_last = cat_rep[:, -1]  # B x f
        query = T.matmul(h_last, self.W_a)  # h_t' W_a
        scores = (cat_rep * query.reshape(query.shape[0], 1, self.f)).sum(axis=2)
        alpha = T.softmax(scores, axis=1)
        context = (cat_rep * alpha.reshape(*alpha.shape, 1)).sum(axis=1)
        out = T.tanh(T.linear(T.concat([context, h_last], axis=1), self.W_c))
        return out, alpha


def iau_forward(unit, cat_rep):
    return unit(cat_rep)[0]
