"""Reverse-mode autodiff over float64 numpy arrays.

Define-by-run: each op appends a node with the inputs it saw and a closure
that maps the output gradient back onto those inputs. ``backward`` walks the
recorded nodes in strict reverse creation order, so gradient accumulation
order is deterministic. There is no implicit broadcasting beyond
scalar-with-tensor; shape changes are explicit ops (``reshape``,
``broadcast_to``, ``concat``, ...).
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np
from scipy import special

_COUNTER = itertools.count()
_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Scope in which ops record nothing on the tape."""
    prev = grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Node:
    """One tape record: creation index, parent tensors, vjp closure."""

    __slots__ = ("idx", "parents", "vjp")

    def __init__(self, parents, vjp):
        self.idx = next(_COUNTER)
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """float64 array plus an optional tape node.

    ``requires_grad`` marks a leaf whose gradient should be kept. Reading
    ``.grad`` before any backward reached the leaf yields zeros; the raw
    buffer (``.grad_buffer``) stays None until something is accumulated,
    which is how frozen-parameter tests observe "no gradient ever arrived".
    """

    __slots__ = ("data", "_requires_grad", "grad_buffer", "node")

    def __init__(self, data, requires_grad: bool = False, node: Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self._requires_grad = bool(requires_grad)
        self.grad_buffer = None
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad or self.node is not None

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self._requires_grad = bool(flag)

    @property
    def grad(self):
        if self.grad_buffer is None:
            return np.zeros_like(self.data)
        return self.grad_buffer

    def zero_grad(self) -> None:
        self.grad_buffer = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data, parents, vjp) -> Tensor:
    """Wrap an op result, recording a node when gradients are live."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, node=Node(tuple(parents), vjp))
    return Tensor(data)


def stop_grad(x: Tensor) -> Tensor:
    """Value-identical copy severed from the tape."""
    return Tensor(x.data.copy())


def backward(root: Tensor) -> None:
    """Populate leaf gradients with d(root)/d(leaf).

    ``root`` must hold exactly one element. Repeated calls accumulate into
    the same leaf buffers (clear with ``zero_grad``).
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    seed = np.ones_like(root.data)
    if root.node is None:
        if root._requires_grad:
            _accumulate(root, seed)
        return

    reachable = {}
    stack = [root.node]
    while stack:
        node = stack.pop()
        if node.idx in reachable:
            continue
        reachable[node.idx] = node
        for p in node.parents:
            if p.node is not None:
                stack.append(p.node)

    pending = {root.node.idx: seed}
    for idx in sorted(reachable, reverse=True):
        node = reachable[idx]
        out_grad = pending.pop(idx, None)
        if out_grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(out_grad)):
            if g is None:
                continue
            if parent.node is not None:
                prev = pending.get(parent.node.idx)
                pending[parent.node.idx] = g if prev is None else prev + g
            elif parent._requires_grad:
                _accumulate(parent, g)


def _accumulate(leaf: Tensor, g) -> None:
    if leaf.grad_buffer is None:
        leaf.grad_buffer = np.array(g, dtype=np.float64, copy=True)
    else:
        leaf.grad_buffer = leaf.grad_buffer + g


# ---------------------------------------------------------------------------
# elementwise binary ops (same shape, or one side a single-element scalar)


def _binary(op_name, a, b, fwd, vjp_a, vjp_b):
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op_name}: shapes {a.shape} vs {b.shape}")
    out = fwd(a.data, b.data)

    def vjp(g):
        return _unbroadcast(vjp_a(g, a.data, b.data), a.shape), _unbroadcast(
            vjp_b(g, a.data, b.data), b.shape
        )

    return _make(out, (a, b), vjp)


def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` after scalar broadcasting."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(
        "mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def div(a, b):
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(a):
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# elementwise unary ops


def _unary(a, fwd, dfwd):
    a = _lift(a)
    out = fwd(a.data)
    return _make(out, (a,), lambda g: (g * dfwd(a.data, out),))


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact (erf-based) gelu; the forward erf is cached for the backward."""
    a = _lift(a)
    half_one_plus_erf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    out = a.data * half_one_plus_erf

    def vjp(g):
        return (g * (half_one_plus_erf + a.data * np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI),)

    return _make(out, (a,), vjp)


def sigmoid(a):
    return _unary(
        a,
        lambda x: 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500))),
        lambda x, y: y * (1.0 - y),
    )


def softplus(a):
    return _unary(
        a,
        lambda x: np.logaddexp(0.0, x),
        lambda x, y: 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500))),
    )


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def arccos(a):
    """Inverse cosine; pair with ``clip`` to keep inputs strictly inside (-1, 1)."""
    return _unary(a, np.arccos, lambda x, y: -1.0 / np.sqrt(1.0 - x * x))


def clip(a, lo: float, hi: float):
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    a = _lift(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _make(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, w, b):
    """x @ w + b with x (n, i), w (i, o), b (o,). Bias broadcast is internal."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError(f"affine: bad ranks x{x.shape} w{w.shape} b{b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"affine: shapes x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data + b.data
    return _make(out, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False):
    a = _lift(a)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape):
    """Explicit broadcast; gradient sums over the expanded axes."""
    a = _lift(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        gg = g
        extra = len(shape) - a.ndim
        if extra:
            gg = gg.sum(axis=tuple(range(extra)))
        for ax, n in enumerate(a.shape):
            if n == 1 and gg.shape[ax] != 1:
                gg = gg.sum(axis=ax, keepdims=True)
        return (gg.reshape(a.shape),)

    return _make(out, (a,), vjp)


def concat(tensors, axis: int = 0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def getitem(a, idx):
    a = _lift(a)
    if isinstance(idx, (list, np.ndarray)):
        idx = np.asarray(idx)
    out = a.data[idx]

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(np.array(out, copy=True), (a,), vjp)


def scatter_rows(base, idx, rows):
    """Copy of ``base`` with ``base[idx] = rows`` (idx an int array, rows stacked)."""
    base, rows = _lift(base), _lift(rows)
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows: duplicate indices")
    out = base.data.copy()
    out[idx] = rows.data

    def vjp(g):
        g_base = g.copy()
        g_base[idx] = 0.0
        return g_base, g[idx].reshape(rows.shape)

    return _make(out, (base, rows), vjp)


# ---------------------------------------------------------------------------
# spatial resampling over the trailing two axes


def _resample_grid(n_in: int, n_out: int):
    """Half-pixel-center source coordinates for each output index."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(src, 0.0, n_in - 1.0)


def resample(a, out_hw, mode: str = "bilinear"):
    """Resize over the last two axes to ``out_hw``; mode nearest or bilinear."""
    a = _lift(a)
    if a.ndim < 2:
        raise ValueError(f"resample: needs >= 2 dims, got {a.shape}")
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh <= 0 or ow <= 0:
        raise ValueError(f"resample: target shape ({oh}, {ow}) must be positive")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"resample: unknown mode {mode!r}")
    h, w = a.shape[-2], a.shape[-1]
    if (oh, ow) == (h, w):
        return _make(a.data.copy(), (a,), lambda g: (g,))

    if mode == "nearest":
        iy = np.floor(_resample_grid(h, oh) + 0.5).astype(np.int64)
        ix = np.floor(_resample_grid(w, ow) + 0.5).astype(np.int64)
        iy, ix = np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)
        out = a.data[..., iy[:, None], ix[None, :]]

        def vjp(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, (..., iy[:, None], ix[None, :]), g)
            return (buf,)

        return _make(out, (a,), vjp)

    sy, sx = _resample_grid(h, oh), _resample_grid(w, ow)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy1, wx1 = sy - y0, sx - x0
    wy0, wx0 = 1.0 - wy1, 1.0 - wx1
    taps = [
        (y0, x0, wy0, wx0),
        (y0, x1, wy0, wx1),
        (y1, x0, wy1, wx0),
        (y1, x1, wy1, wx1),
    ]
    out = np.zeros(a.shape[:-2] + (oh, ow), dtype=np.float64)
    for yy, xx, wy, wx in taps:
        out += (wy[:, None] * wx[None, :]) * a.data[..., yy[:, None], xx[None, :]]

    def vjp(g):
        buf = np.zeros_like(a.data)
        for yy, xx, wy, wx in taps:
            np.add.at(buf, (..., yy[:, None], xx[None, :]), g * (wy[:, None] * wx[None, :]))
        return (buf,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# losses


def l1(a, b):
    """Mean absolute difference over all elements."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ValueError(f"l1: shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.mean(np.abs(diff))
    n = a.size

    def vjp(g):
        s = g * np.sign(diff) / n
        return s, -s

    return _make(out, (a, b), vjp)


def l2(a, b):
    """Mean squared difference over all elements."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ValueError(f"l2: shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.mean(diff * diff)
    n = a.size

    def vjp(g):
        s = g * 2.0 * diff / n
        return s, -s

    return _make(out, (a, b), vjp)


def log_softmax(logits):
    """Row-wise log softmax for (n, c) logits."""
    logits = _lift(logits)
    if logits.ndim != 2:
        raise ValueError(f"log_softmax: expects (n, c), got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def vjp(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (logits,), vjp)


def softmax_ce(logits, labels):
    """Mean cross-entropy of (n, c) logits against integer labels (n,)."""
    logits = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ValueError(
            f"softmax_ce: logits {logits.shape} vs labels ({labels.shape[0]},)"
        )
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"softmax_ce: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# generic dispatch (operation-name surface used by the op-table tests)

_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "affine": affine,
    "tanh": tanh,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "arccos": arccos,
    "clip": clip,
    "sum": tsum,
    "mean": tmean,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "concat": concat,
    "getitem": getitem,
    "scatter_rows": scatter_rows,
    "resample": resample,
    "l1": l1,
    "l2": l2,
    "log_softmax": log_softmax,
    "softmax_ce": softmax_ce,
    "stop_grad": stop_grad,
}


def forward_op(op: str, *inputs, **kwargs):
    """Apply an op by name; unknown names raise with the known set."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"forward_op: unknown op {op!r} (known: {sorted(_OPS)})") from None
    return fn(*inputs, **kwargs)
