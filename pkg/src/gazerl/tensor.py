"""Reverse-mode automatic differentiation on numpy arrays.

A DTensor wraps an ndarray plus an optional gradient slot.  Applying a
primitive records a Node holding the inputs and a closure that maps the
output cotangent to input cotangents (a VJP).  backward() walks the
recorded graph once in reverse topological order and accumulates
gradients into the leaves.

Only the primitives needed by the perception / contrastive / RL stack
are implemented.  Everything runs on plain numpy; float32 is the
training dtype, float64 is used by the finite-difference checks.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "DTensor", "Graph", "ShapeError", "no_grad", "grad_enabled",
    "add", "sub", "mul", "div", "scale", "neg", "relu", "sigmoid", "tanh",
    "exp", "log", "softplus", "clamp", "minimum", "maximum", "tsum",
    "tmean", "reshape", "tslice", "take", "matmul", "linear", "conv2d",
    "maxpool2d", "l2_normalize", "cosine_similarity", "PRIMITIVES",
    "apply_primitive",
]


class ShapeError(ValueError):
    """Operand shapes are invalid for a primitive."""


_state = threading.local()


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Context manager that suspends graph recording (e.g. rollouts)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded primitive application.

    ``vjp`` maps the output cotangent to a tuple of input cotangents,
    aligned with ``inputs``; entries may be None for non-differentiable
    arguments.
    """

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class DTensor:
    """Dense tensor with an optional accumulated gradient.

    ``grad`` is None until backward() reaches this tensor as a leaf;
    afterwards it has exactly the shape of ``data`` and repeated
    backward passes keep accumulating into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        """A view of the same data cut off from the graph."""
        return DTensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; scalars are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return tslice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like=None):
    if isinstance(x, DTensor):
        return x
    dtype = like.dtype if like is not None else None
    return DTensor(np.asarray(x), dtype=dtype)


def _needs_graph(*tensors):
    if not grad_enabled():
        return False
    return any(t.requires_grad or t.node is not None for t in tensors)


def _make(op, data, inputs, vjp):
    out = DTensor(data, dtype=data.dtype)
    if _needs_graph(*inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), vjp)
    return out


class Graph:
    """Reverse-topological view of the nodes reachable from an output."""

    def __init__(self, order):
        self.order = order  # leaves-first topological order of node-bearing tensors

    def __len__(self):
        return len(self.order)

    @classmethod
    def trace(cls, output):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            t, ready = stack.pop()
            if t.node is None:
                continue
            if ready:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                stack.append((parent, False))
        return cls(order)


def backward(loss, graph=None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    ``loss`` must be scalar (size one).  Leaves keep accumulating across
    calls; use zero_grad() between optimization steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    if loss.node is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += np.ones_like(loss.data)
        return
    flowing = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.order):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.vjp(g)):
            if pg is None:
                continue
            if parent.node is not None:
                acc = flowing.get(id(parent))
                flowing[id(parent)] = pg if acc is None else acc + pg
            elif parent.requires_grad:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg


def _unbroadcast(g, shape):
    """Sum a broadcast cotangent back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_data(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _broadcast_data("add", a.data, b.data)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", data, (a, b), vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a if isinstance(a, DTensor) else None)
    _broadcast_data("sub", a.data, b.data)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", data, (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _broadcast_data("mul", a.data, b.data)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", data, (a, b), vjp)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _broadcast_data("div", a.data, b.data)
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", data, (a, b), vjp)


def scale(x, c):
    """Multiply by a python constant (no gradient w.r.t. ``c``)."""
    c = float(c)
    data = x.data * np.asarray(c, dtype=x.dtype)

    def vjp(g):
        return (g * np.asarray(c, dtype=g.dtype),)

    return _make("scale", data, (x,), vjp)


def neg(x):
    return scale(x, -1.0)


def relu(x):
    data = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient 0 at the kink

    def vjp(g):
        return (g * mask,)

    return _make("relu", data, (x,), vjp)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    data = _stable_sigmoid(x.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make("sigmoid", data, (x,), vjp)


def tanh(x):
    data = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _make("tanh", data, (x,), vjp)


def exp(x):
    data = np.exp(x.data)

    def vjp(g):
        return (g * data,)

    return _make("exp", data, (x,), vjp)


def log(x):
    data = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _make("log", data, (x,), vjp)


def softplus(x):
    data = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    sig = _stable_sigmoid(x.data)

    def vjp(g):
        return (g * sig,)

    return _make("softplus", data, (x,), vjp)


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi (inclusive)."""
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} > hi {hi}")
    data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _make("clamp", data, (x,), vjp)


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _broadcast_data("minimum", a.data, b.data)
    data = np.minimum(a.data, b.data)
    first = a.data <= b.data

    def vjp(g):
        return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)

    return _make("minimum", data, (a, b), vjp)


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _broadcast_data("maximum", a.data, b.data)
    data = np.maximum(a.data, b.data)
    first = a.data >= b.data

    def vjp(g):
        return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)

    return _make("maximum", data, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, x.ndim)

    def vjp(g):
        if not keepdims:
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(data, dtype=x.dtype), (x,), vjp)


def tmean(x, axis=None, keepdims=False):
    axes = _axis_tuple(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make("reshape", data, (x,), vjp)


def tslice(x, key):
    """Basic indexing (ints/slices); gradient scatters into a zero tensor."""
    data = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make("slice", data, (x,), vjp)


def take(x, indices, axis=0):
    """Row gather with repeats allowed; backward adds duplicates together."""
    indices = np.asarray(indices)
    data = np.take(x.data, indices, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (indices,), g)
        return (gx,)

    return _make("take", data, (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", data, (a, b), vjp)


def linear(x, w, b=None):
    """Affine map: x (B, in) times w (out, in) transposed, plus bias (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    data = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
        data = data + b.data

    def vjp(g):
        gx = g @ w.data
        gw = g.T @ x.data
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("linear", data, inputs, vjp)


def _im2col(x, kh, kw, stride):
    """Gather sliding windows into a (B*Ho*Wo, C*kh*kw) matrix."""
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    cols = windows.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(gcols, x_shape, kh, kw, stride, ho, wo):
    """Scatter-add column gradients back onto the input plane."""
    b, c, h, w = x_shape
    gx = np.zeros(x_shape, dtype=gcols.dtype)
    gwin = gcols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gwin[:, :, i, j]
    return gx


def conv2d(x, w, b=None, stride=1):
    """Valid cross-correlation of x (B,C,H,W) with w (Cout,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    bt, c, h, wdt = x.shape
    cout, _, kh, kw = w.shape
    if h < kh or wdt < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride)
    wmat = w.data.reshape(cout, c * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} incompatible with weight {w.shape}")
        out += b.data
    data = np.ascontiguousarray(out.reshape(bt, ho, wo, cout).transpose(0, 3, 1, 2))

    def vjp(g):
        go = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bt * ho * wo, cout)
        gw = (go.T @ cols).reshape(w.shape)
        gcols = go @ wmat
        gx = _col2im(gcols, x.shape, kh, kw, stride, ho, wo)
        if b is None:
            return gx, gw
        return gx, gw, go.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", data, inputs, vjp)


def maxpool2d(x, k=2):
    """Non-overlapping k-by-k max pooling; ties keep the first (row-major) cell."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than window {k}")
    ho, wo = h // k, w // k
    hc, wc = ho * k, wo * k
    win = (
        x.data[:, :, :hc, :wc]
        .reshape(b, c, ho, k, wo, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, ho, wo, k * k)
    )
    idx = win.argmax(axis=-1)  # argmax returns the first maximal cell
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gwin = np.zeros((b, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :hc, :wc] = (
            gwin.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hc, wc)
        )
        return (gx,)

    return _make("maxpool2d", data, (x,), vjp)


# ---------------------------------------------------------------------------
# normalized similarity

L2_EPS = 1e-8


def l2_normalize(x, axis=-1):
    """x / (||x|| + 1e-8) along ``axis``; zero vectors map to zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = norm + L2_EPS
    data = x.data / denom

    def vjp(g):
        # y = x / (n + eps): dn/dx = x / n, guarded where n == 0 (then y == 0 anyway)
        safe = np.where(norm > 0, norm, 1.0)
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        return (g / denom - x.data * (dot / (denom * denom * safe)),)

    return _make("l2_normalize", data, (x,), vjp)


def cosine_similarity(a, b, axis=-1):
    """Cosine of the angle between a and b along ``axis`` (stabilized)."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    return tsum(mul(l2_normalize(a, axis=axis), l2_normalize(b, axis=axis)), axis=axis)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "clamp": clamp,
    "minimum": minimum,
    "maximum": maximum,
    "sum": tsum,
    "mean": tmean,
    "reshape": reshape,
    "slice": tslice,
    "take": take,
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "l2_normalize": l2_normalize,
    "cosine_similarity": cosine_similarity,
}


def apply_primitive(name, *args, **kwargs):
    """Dispatch a primitive by name (used by the gradient checker)."""
    if name not in PRIMITIVES:
        raise KeyError(f"unknown primitive {name!r}")
    return PRIMITIVES[name](*args, **kwargs)
