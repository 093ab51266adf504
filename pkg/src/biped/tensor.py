"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` orders the recorded graph topologically (a :class:`Tape`)
and walks it once in reverse, summing gradients for tensors with several
consumers.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> grads = backward((x * x).sum())
    >>> grads[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
import threading

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "matmul",
    "linear",
    "conv2d",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "tanh",
    "softsign",
    "relu",
    "exp",
    "log",
    "logcosh_elem",
    "elementwise",
    "clip",
    "softmax",
    "concat",
    "stack",
    "take_rows",
    "pick",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "transpose",
]

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        return backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn, op):
    """Wrap ``data`` as an operation output, recording it when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# -- tape ----------------------------------------------------------------
class Tape:
    """Topologically ordered record of the operations behind a tensor."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss):
    """Differentiate scalar ``loss``; return ``{leaf tensor: gradient}``.

    Leaf gradients are also accumulated into ``leaf.grad``.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring gradients")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


# -- arithmetic ------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), grad_fn, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    """Matrix product with numpy ``@`` semantics (batched leading axes allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is out x in."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}"
        )
    out = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = parents + (bias,)

    def grad_fn(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, grad_fn, "linear")


# -- convolution -----------------------------------------------------------
# im2col matrices above this many entries fall back to shift-and-add
_IM2COL_LIMIT = 2 ** 23


def conv2d(x, kernel, bias, stride=1):
    """Valid cross-correlation of ``x`` (C x H x W or N x C x H x W).

    ``kernel`` is C_out x C_in x kh x kw. Small inputs go through an
    im2col matrix product; large ones are computed as a sum of shifted,
    strided slices so memory stays proportional to the output.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if stride < 1 or int(stride) != stride:
        raise ContractError(f"conv2d: stride must be a positive int, got {stride}")
    stride = int(stride)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks input {x.shape}, kernel {kernel.shape}")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(
            f"conv2d: input has {cin} channels but kernel {kernel.shape} expects {kcin}"
        )
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    kd = kernel.data
    use_cols = n * ho * wo * cin * kh * kw <= _IM2COL_LIMIT

    def window(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    cols = None
    if use_cols:
        view = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
        view = view[:, :, ::stride, ::stride]  # n, cin, ho, wo, kh, kw
        cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
        out = (cols @ kd.reshape(cout, -1).T).reshape(n, ho, wo, cout)
    else:
        out = np.zeros((n, ho, wo, cout))
        for i in range(kh):
            for j in range(kw):
                patch = xd[window(i, j)].transpose(0, 2, 3, 1)
                out += patch @ kd[:, :, i, j].T
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        gl = g4.transpose(0, 2, 3, 1)  # n, ho, wo, cout
        gflat = gl.reshape(-1, cout)
        gb = g4.sum(axis=(0, 2, 3))
        gx = None
        if cols is not None:
            gk = (gflat.T @ cols).reshape(kd.shape)
            if x.requires_grad:
                # channel-major scratch so each scatter is a plain strided add
                gcols = (kd.reshape(cout, -1).T @ gflat.T).reshape(cin, kh, kw, n, ho, wo)
                gxt = np.zeros((cin, n, h, w))
                for i in range(kh):
                    for j in range(kw):
                        gxt[(slice(None),) + window(i, j)[1:]] += gcols[:, i, j]
                gx = gxt.transpose(1, 0, 2, 3)
        else:
            gx = np.zeros_like(xd) if x.requires_grad else None
            gk = np.zeros_like(kd)
            for i in range(kh):
                for j in range(kw):
                    win = window(i, j)
                    patch = xd[win].transpose(0, 2, 3, 1).reshape(-1, cin)
                    gk[:, :, i, j] = gflat.T @ patch
                    if gx is not None:
                        gx[win] += (gl @ kd[:, :, i, j]).transpose(0, 3, 1, 2)
        if gx is not None and squeeze:
            gx = gx[0]
        return gx, gk, gb

    return _make(np.ascontiguousarray(out), (x, kernel, bias), grad_fn, "conv2d")


# -- elementwise nonlinearities ------------------------------------------
def _unary(a, fwd, dfn, op):
    a = as_tensor(a)
    y = fwd(a.data)
    return _make(y, (a,), lambda g: (g * dfn(a.data, y),), op)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary(a, _sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def softsign(a):
    return _unary(a, lambda x: x / (1.0 + np.abs(x)),
                  lambda x, y: 1.0 / (1.0 + np.abs(x)) ** 2, "softsign")


def _note_kinks(pattern):
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(np.packbits(pattern).tobytes())


def relu(a):
    a = as_tensor(a)
    _note_kinks(a.data > 0)
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64), "relu")


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


_LOG2 = np.log(2.0)


def _logcosh(x):
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - _LOG2


def logcosh_elem(a):
    """Elementwise ``log(cosh(a))`` evaluated without overflow."""
    return _unary(a, _logcosh, lambda x, y: np.tanh(x), "logcosh")


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    _note_kinks(np.stack([a.data >= lo, a.data <= hi]))
    return _unary(a, lambda x: np.clip(x, lo, hi),
                  lambda x, y: ((x >= lo) & (x <= hi)).astype(np.float64), "clip")


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softsign": softsign,
    "relu": relu,
    "logcosh_elem": logcosh_elem,
    "exp": exp,
    "log": log,
}
_BINARY = {"add": add, "mul": mul, "sub": sub, "div": div}


def elementwise(op, *args):
    """Dispatch an elementwise operation by name."""
    if op in _UNARY:
        if len(args) != 1:
            raise ContractError(f"{op} takes one argument, got {len(args)}")
        return _UNARY[op](args[0])
    if op in _BINARY:
        if len(args) != 2:
            raise ContractError(f"{op} takes two arguments, got {len(args)}")
        return _BINARY[op](*args)
    raise ContractError(f"unknown elementwise op {op!r}")


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax")


# -- structural ------------------------------------------------------------
def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        grads = []
        for k in range(len(tensors)):
            idx = [slice(None)] * nd
            idx[ax] = slice(bounds[k], bounds[k + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(out, tuple(tensors), grad_fn, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes {sorted(shapes)} differ")
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    return _make(out, tuple(tensors), grad_fn, "stack")


def _getitem(a, index):
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), grad_fn, "slice")


def take_rows(table, indices):
    """Row lookup ``table[indices]`` (embedding); indices is an int array."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(
            f"take_rows: index out of range for table with {table.shape[0]} rows"
        )
    out = table.data[idx]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _make(out, (table,), grad_fn, "take_rows")


def pick(x, indices):
    """Select ``x[..., indices]`` per leading row: out[b] = x[b, indices[b]]."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick: expected (B, K) input and (B,) indices, got {x.shape}, {idx.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        return (full,)

    return _make(out, (x,), grad_fn, "pick")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), grad_fn, "sum")


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), grad_fn, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


# -- finite differences ------------------------------------------------
@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every relu/clip evaluated in the block."""
    prev = getattr(_state, "kinks", None)
    log = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


@dataclass
class GradCheckReport:
    error: float  # worst relative error over compared coordinates
    checked: int
    skipped: int  # coordinates whose stencil straddles a relu/clip kink


def grad_check_report(f, x, eps=1e-4, coords=None, skip_kinks=True):
    """Compare tape and central-difference gradients of scalar ``f`` at ``x``.

    ``f`` maps ``x`` (a Tensor, perturbed in place) to a scalar Tensor and
    ``coords`` optionally restricts the check to flat indices of ``x``. The
    error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``. When
    ``skip_kinks`` is set, a coordinate is left out if some relu or clip
    takes a different branch at ``x + eps`` than at ``x - eps``: the function
    is not differentiable inside that stencil.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    grads = backward(out)
    analytic = grads.get(x)
    analytic = np.zeros_like(x.data) if analytic is None else analytic.reshape(-1)
    x.grad = None
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst, checked, skipped = 0.0, 0, 0
    with no_grad():
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            with record_kinks() as kp:
                fp = float(f(x).data)
            flat[k] = orig - eps
            with record_kinks() as km:
                fm = float(f(x).data)
            flat[k] = orig
            if skip_kinks and kp != km:
                skipped += 1
                continue
            num = (fp - fm) / (2.0 * eps)
            a = analytic[k]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(worst, checked, skipped)


def grad_check(f, x, eps=1e-4, coords=None, skip_kinks=True):
    """Largest relative error between tape and central-difference gradients."""
    return grad_check_report(f, x, eps, coords, skip_kinks).error
