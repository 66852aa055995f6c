"""Reverse-mode gradient tape over numpy arrays.

Minimal by design: only the operations the render/loss pipeline needs.
Tensors wrap ndarrays; every op that sees a grad-requiring input appends a
backward closure to the graph.  ``backward(loss)`` walks the graph once in
reverse topological order and accumulates ``.grad`` on the leaves.

Gradient correctness is enforced externally by the finite-difference suite in
:mod:`artiplane.diffengine`; nothing here is trusted without that check.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import _kernels

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """ndarray plus an optional backward edge list."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __float__(self):
        return float(self.data)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g, own: bool = False):
        """Add g into the gradient buffer.

        `own=True` promises g is a fresh array (or the caller's last use of
        it), letting the first accumulation adopt it without a copy.  A
        backward closure may hand over its incoming gradient this way only
        for its final accumulate call.
        """
        if self.grad is None:
            if own and isinstance(g, np.ndarray) and g.dtype == self.data.dtype:
                self.grad = g if g.flags.writeable else g.copy()
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow(other, -1.0))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(pow(self, -1.0), other)

    def __pow__(self, k):
        return pow(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad}{tag})"


def ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _track(*xs) -> bool:
    if not _grad_enabled:
        return False
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents, backward) -> Tensor:
    if backward is None:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


# ---------------------------------------------------------------- basic ops
# python-number operands stay raw scalars: wrapping them in 0-d float64
# arrays would silently upcast float32 pipelines under numpy 2 promotion.
# Backward closures pass `own=True` on their last use of a fresh gradient
# array so the receiving leaf can adopt it instead of copying.

def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = ensure(a)
        out = a.data + b
        if not _track(a):
            return Tensor(out)

        def bwd_s(g):
            a.accumulate_grad(g, own=True)

        return _make(out, (a,), bwd_s)
    a, b = ensure(a), ensure(b)
    out = a.data + b.data
    if not _track(a, b):
        return Tensor(out)

    def bwd(g):
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            b.accumulate_grad(gb, own=gb is not g)
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape), own=True)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = ensure(a)
        out = a.data * b
        if not _track(a):
            return Tensor(out)

        def bwd_s(g):
            a.accumulate_grad(g * b, own=True)

        return _make(out, (a,), bwd_s)
    a, b = ensure(a), ensure(b)
    out = a.data * b.data
    if not _track(a, b):
        return Tensor(out)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape), own=True)

    return _make(out, (a, b), bwd)


def pow(a, k: float) -> Tensor:
    a = ensure(a)
    out = a.data ** k
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        a.accumulate_grad(g * (k * a.data ** (k - 1.0)), own=True)

    return _make(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    out = a.data @ b.data
    if not _track(a, b):
        return Tensor(out)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T, own=True)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g, own=True)

    return _make(out, (a, b), bwd)


def linear(x, w, b, relu_act: bool = False) -> Tensor:
    """Fused x @ w.T + b with optional rectifier.

    One node instead of three keeps the hidden activations to a single
    buffer; the rectifier mask is recovered от the output sign.
    """
    x, w, b = ensure(x), ensure(w), ensure(b)
    h = x.data @ w.data.T
    h += b.data
    if relu_act:
        np.maximum(h, 0.0, out=h)
    if not _track(x, w, b):
        return Tensor(h)

    def bwd(g):
        gm = g * (h > 0.0) if relu_act else g
        if x.requires_grad:
            x.accumulate_grad(gm @ w.data, own=True)
        if w.requires_grad:
            w.accumulate_grad(gm.T @ x.data, own=True)
        if b.requires_grad:
            b.accumulate_grad(gm.sum(axis=0), own=True)

    return _make(h, (x, w, b), bwd)


def exp(a) -> Tensor:
    a = ensure(a)
    out = np.exp(a.data)
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        a.accumulate_grad(g * out, own=True)

    return _make(out, (a,), bwd)


def log(a) -> Tensor:
    a = ensure(a)
    out = np.log(a.data)
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        a.accumulate_grad(g / a.data, own=True)

    return _make(out, (a,), bwd)


def relu(a) -> Tensor:
    a = ensure(a)
    out = np.maximum(a.data, 0.0)
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        a.accumulate_grad(g * (a.data > 0.0), own=True)

    return _make(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = ensure(a)
    # tanh form is stable for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        a.accumulate_grad(g * (out * (1.0 - out)), own=True)

    return _make(out, (a,), bwd)


def softplus(a) -> Tensor:
    a = ensure(a)
    out = np.logaddexp(0.0, a.data)
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        a.accumulate_grad(g * (0.5 * (1.0 + np.tanh(0.5 * a.data))), own=True)

    return _make(out, (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    a = ensure(a)
    out = np.clip(a.data, lo, hi)
    if not _track(a):
        return Tensor(out)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        a.accumulate_grad(g * mask, own=True)

    return _make(out, (a,), bwd)


def sum(a, axis=None, keepdims=False) -> Tensor:
    a = ensure(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.data.shape))

    return _make(out, (a,), bwd)


def sum_expand(a, n: int) -> Tensor:
    """Broadcast a (N, 1) tensor to (N, n) by repetition (weight fan-out)."""
    a = ensure(a)
    out = np.broadcast_to(a.data, (a.data.shape[0], n))
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        a.accumulate_grad(g.sum(axis=1, keepdims=True), own=True)

    return _make(out, (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = ensure(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a, axis: int) -> Tensor:
    a = ensure(a)
    out = np.cumsum(a.data, axis=axis)
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        a.accumulate_grad(rev, own=True)

    return _make(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = ensure(a)
    out = a.data.reshape(shape)
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        a.accumulate_grad(g.reshape(a.data.shape), own=True)

    return _make(out, (a,), bwd)


def concatenate(parts, axis: int = 0) -> Tensor:
    parts = [ensure(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    if not _track(*parts):
        return Tensor(out)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                # disjoint views of g, safe for every parent to adopt
                p.accumulate_grad(g[tuple(idx)], own=True)

    return _make(out, tuple(parts), bwd)


def getitem(a, key) -> Tensor:
    a = ensure(a)
    out = a.data[key]
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        a.accumulate_grad(buf, own=True)

    return _make(out, (a,), bwd)


def getcols(a, lo: int, hi: int) -> Tensor:
    """Column slice a[:, lo:hi] with an assignment-based backward."""
    a = ensure(a)
    out = a.data[:, lo:hi]
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        buf = _grad_buffer(a)
        buf[:, lo:hi] += g

    return _make(out, (a,), bwd)


def _scatter_rows(n_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Deterministic index-accumulate of (M, C) rows into an (n_rows, C) buffer."""
    shape = (n_rows,) if vals.ndim == 1 else (n_rows, vals.shape[1])
    out = np.zeros(shape, dtype=vals.dtype)
    _kernels.row_scatter(out, idx, vals)
    return out


def _grad_buffer(t: Tensor) -> np.ndarray:
    """The tensor's gradient array, allocating zeros on first touch."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Rows a[idx] of a 1-D or 2-D tensor; backward scatter-adds into a."""
    a = ensure(a)
    out = a.data[idx]
    if not _track(a):
        return Tensor(out)

    def bwd(g):
        _kernels.row_scatter(_grad_buffer(a), idx, g)

    return _make(out, (a,), bwd)


def index_add(n_rows: int, idx: np.ndarray, vals) -> Tensor:
    """Accumulate value rows into a fresh zero buffer of n_rows rows."""
    vals = ensure(vals)
    out = _scatter_rows(n_rows, idx, vals.data)
    if not _track(vals):
        return Tensor(out)

    def bwd(g):
        vals.accumulate_grad(g[idx], own=True)

    return _make(out, (vals,), bwd)


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Select a where mask else b; mask is a plain boolean array."""
    a, b = ensure(a), ensure(b)
    out = np.where(mask, a.data, b.data)
    if not _track(a, b):
        return Tensor(out)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * mask, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ~mask, b.data.shape))

    return _make(out, (a, b), bwd)


# ------------------------------------------------------- bilinear plane ops

def _corner_setup(px: np.ndarray, py: np.ndarray, res: int, dtype):
    """Clamped corner indices and fractional weights for texel coords."""
    cx = np.clip(px, 0.0, res - 1.0)
    cy = np.clip(py, 0.0, res - 1.0)
    x0f = np.floor(cx)
    y0f = np.floor(cy)
    fx = (cx - x0f).astype(dtype)
    fy = (cy - y0f).astype(dtype)
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = np.minimum(x0 + 1, res - 1)
    y1 = np.minimum(y0 + 1, res - 1)
    inside_x = (px > 0.0) & (px < res - 1.0)
    inside_y = (py > 0.0) & (py < res - 1.0)
    return x0, x1, y0, y1, fx, fy, inside_x, inside_y


def plane_gather(plane, px, py, res: int, col: int | None = None,
                 corners=None) -> Tensor:
    """Bilinear lookup on a (res*res, C) plane at texel coordinates.

    ``px``/``py`` are continuous texel coordinates in [0, res-1] (values
    outside are clamped to the border).  Either may itself be a Tensor, in
    which case gradients also flow into the coordinates — that path carries
    the deformation-field warp.  ``col`` restricts the lookup to one channel
    (selector-probability reads).  ``corners`` reuses a precomputed
    ``_corner_setup`` result when several planes share coordinates.  Fused
    into one node backed by :mod:`artiplane._kernels`; a chain of primitive
    gather/lerp ops here would dominate the tape.
    """
    plane = ensure(plane)
    px_t = px if isinstance(px, Tensor) else None
    py_t = py if isinstance(py, Tensor) else None
    p_full = plane.data
    p = p_full if col is None else p_full[:, col:col + 1]
    if corners is None:
        pxd = px.data if px_t is not None else np.asarray(px)
        pyd = py.data if py_t is not None else np.asarray(py)
        corners = _corner_setup(pxd, pyd, res, p_full.dtype)
    x0, x1, y0, y1, fx, fy, ins_x, ins_y = corners
    out = _kernels.bil_gather(p, x0, x1, y0, y1, fx, fy, res)
    if not _track(plane, px_t, py_t):
        return Tensor(out)

    def bwd(g):
        if g.dtype != p.dtype:
            g = g.astype(p.dtype)
        if plane.requires_grad:
            buf = _grad_buffer(plane)
            if col is not None:
                buf = buf[:, col:col + 1]
            _kernels.bil_scatter(buf, x0, x1, y0, y1, fx, fy, g, res)
        if (px_t is not None and px_t.requires_grad) or (py_t is not None and py_t.requires_grad):
            gx, gy = _kernels.bil_coord_grad(p, x0, x1, y0, y1, fx, fy, g, res)
            if px_t is not None and px_t.requires_grad:
                px_t.accumulate_grad((gx * ins_x).astype(px_t.data.dtype), own=True)
            if py_t is not None and py_t.requires_grad:
                py_t.accumulate_grad((gy * ins_y).astype(py_t.data.dtype), own=True)

    parents = tuple(t for t in (plane, px_t, py_t) if isinstance(t, Tensor))
    return _make(out, parents, bwd)


# ------------------------------------------------------------------ engine

def backward(loss: Tensor, seed_grad=None):
    """Propagate d(loss)/d(leaf) through the recorded graph."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor with no recorded graph")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    if seed_grad is None:
        seed_grad = np.ones_like(loss.data)
    loss.grad = np.asarray(seed_grad, dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior activations are single-use; free them eagerly
            if node is not loss:
                node.grad = None
