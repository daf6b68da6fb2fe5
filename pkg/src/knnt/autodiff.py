"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar replays the recorded ops in reverse creation
order (the ``Tape``) and accumulates gradients additively into every
reachable tensor that requires them.

Hot recurrent loops do not run op-by-op: ``lstm_sequence`` is a single tape
node whose forward and backward sweeps are the kernels in
:mod:`knnt.kernels`.  The per-step ``lstm_cell`` built from elementary ops
is kept as the reference path; the two are cross-checked in the tests.

Inference code wraps its calls in ``no_grad()`` so no graph is recorded.
Graphs are thread-confined: tensors carry no locks and must not be shared
between concurrently differentiating threads.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


_id_counter = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._id = next(_id_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph -------------------------------------------------------------

    def backward(self):
        """Run the reverse sweep from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        tape = Tape(self)
        tape.run(np.ones_like(self.data))

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def item(self) -> float:
        return float(self.data.reshape(()))


class Tape:
    """Ordered record of the ops reachable from a root tensor.

    Creation ids increase monotonically and every parent precedes its
    children, so sorting the reachable set by id yields a topological
    order; the reverse sweep walks it back to front.
    """

    def __init__(self, root: Tensor):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id)
        self.nodes = nodes
        self.root = root

    def run(self, seed_grad: np.ndarray):
        self.root.grad = _accum(self.root.grad, seed_grad)
        for t in reversed(self.nodes):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def _accum(buf, g):
    if buf is None:
        return np.array(g, dtype=np.float64, copy=True)
    buf += g
    return buf


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents, backward) -> Tensor:
    """Create a graph node; ``backward(out_grad)`` must push into parents.

    When grad mode is off or no parent requires grad the node is detached.
    This is the extension point fused primitives (e.g. the transducer
    lattice loss) use to register hand-written backward sweeps.
    """
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _receive(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = _accum(t.grad, g)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _receive(a, _unbroadcast(g, a.data.shape))
        _receive(b, _unbroadcast(g, b.data.shape))

    return make_op(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _receive(a, _unbroadcast(g, a.data.shape))
        _receive(b, _unbroadcast(-g, b.data.shape))

    return make_op(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _receive(a, _unbroadcast(g * b.data, a.data.shape))
        _receive(b, _unbroadcast(g * a.data, b.data.shape))

    return make_op(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from e

    def backward(g):
        _receive(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _receive(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return make_op(out_data, (a, b), backward)


def affine(x, w, b) -> Tensor:
    """out[..., i] = sum_j w[i, j] * x[..., j] + b[i].

    w has shape (n, m) mapping m inputs to n outputs, matching the
    convention that weight rows are output units.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0] or x.shape[-1] != w.shape[1]:
        raise ShapeError(
            f"affine shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    out_data = x.data @ w.data.T + b.data

    def backward(g):
        _receive(x, g @ w.data)
        g2 = g.reshape(-1, w.data.shape[0])
        x2 = x.data.reshape(-1, w.data.shape[1])
        _receive(w, g2.T @ x2)
        _receive(b, g2.sum(axis=0))

    return make_op(out_data, (x, w, b), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        _receive(x, g * (1.0 - y * y))

    return make_op(y, (x,), backward)


# Spec name for the activation used inside the joiner.
tanh_act = tanh


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def backward(g):
        _receive(x, g * y * (1.0 - y))

    return make_op(y, (x,), backward)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _receive(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _receive(x, np.broadcast_to(gg, x.data.shape).copy())

    return make_op(out_data, (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        _receive(x, g.reshape(x.data.shape))

    return make_op(out_data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        _receive(x, np.transpose(g, inv))

    return make_op(out_data, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _receive(t, g[tuple(idx)])

    return make_op(out_data, tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        for i, t in enumerate(tensors):
            _receive(t, moved[i])

    return make_op(out_data, tuple(tensors), backward)


def take(x, key) -> Tensor:
    """Indexing/slicing; gradients scatter (and sum) back into place."""
    x = _as_tensor(x)
    out_data = x.data[key]
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            if fancy:
                np.add.at(buf, key, g)
            else:
                buf[key] += g
            x.grad = _accum(x.grad, buf)

    return make_op(np.array(out_data, copy=True), (x,), backward)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: rows of table (V, E) selected by int array ids."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            table.grad = _accum(table.grad, buf)

    return make_op(out_data, (table,), backward)


def softmax(x, axis=-1) -> Tensor:
    """Max-stabilized softmax along one axis; output sums to 1."""
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _receive(x, y * (g - dot))

    return make_op(y, (x,), backward)


def log_softmax(x, axis=-1) -> Tensor:
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        soft = np.exp(y)
        _receive(x, g - soft * g.sum(axis=axis, keepdims=True))

    return make_op(y, (x,), backward)


def logsumexp(x, axis=None, keepdims=False) -> Tensor:
    """Stable log-sum-exp; an all -inf reduction yields -inf, grads zero."""
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x.data - m_safe).sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = np.where(np.isfinite(m), np.log(s) + m_safe, m)
    if keepdims:
        out_data = out_k
    elif axis is None:
        out_data = out_k.reshape(())
    else:
        out_data = np.squeeze(out_k, axis=axis)

    def backward(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = gg.reshape(out_k.shape)
        with np.errstate(invalid="ignore"):
            soft = np.exp(x.data - out_k)
        soft = np.where(np.isfinite(x.data), np.nan_to_num(soft), 0.0)
        _receive(x, gg * soft)

    return make_op(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# Recurrent primitives
# ---------------------------------------------------------------------------

def lstm_cell(x, h_prev, c_prev, wx, wh, b):
    """One LSTM step from elementary ops (reference path).

    x: (B, I), h_prev/c_prev: (B, H), wx: (I, 4H), wh: (H, 4H), b: (4H,).
    Gate block order is [input | forget | cell | output]; returns (h, c).
    """
    x, h_prev, c_prev = _as_tensor(x), _as_tensor(h_prev), _as_tensor(c_prev)
    wx, wh, b = _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    if x.shape[-1] != wx.shape[0] or h_prev.shape[-1] != wh.shape[0]:
        raise ShapeError(
            f"lstm_cell shape mismatch: x {x.shape}, h {h_prev.shape}, "
            f"wx {wx.shape}, wh {wh.shape}")
    H = wh.shape[0]
    gates = add(add(matmul(x, wx), matmul(h_prev, wh)), b)
    gi = sigmoid(gates[:, :H])
    gf = sigmoid(gates[:, H:2 * H])
    gc = tanh(gates[:, 2 * H:3 * H])
    go = sigmoid(gates[:, 3 * H:])
    c = add(mul(gf, c_prev), mul(gi, gc))
    h = mul(go, tanh(c))
    return h, c


def lstm_sequence(x, h0, c0, wx, wh, b) -> Tensor:
    """Whole-sequence LSTM as one tape node backed by the fused kernels.

    x: (T, B, I) time-major.  Returns the hidden states (T, B, H); the final
    hidden state is row ``[-1]``.
    """
    x, h0, c0 = _as_tensor(x), _as_tensor(h0), _as_tensor(c0)
    wx, wh, b = _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    if x.ndim != 3 or x.shape[-1] != wx.shape[0]:
        raise ShapeError(f"lstm_sequence shape mismatch: x {x.shape}, wx {wx.shape}")
    xc = np.ascontiguousarray(x.data)
    h_all, c_all, acts = kernels.lstm_seq_forward(
        xc, h0.data, c0.data, wx.data, wh.data, b.data)

    def backward(g):
        dx, dh0, dc0, dwx, dwh, db = kernels.lstm_seq_backward(
            xc, h0.data, c0.data, wx.data, wh.data,
            h_all, c_all, acts, np.ascontiguousarray(g))
        _receive(x, dx)
        _receive(h0, dh0)
        _receive(c0, dc0)
        _receive(wx, dwx)
        _receive(wh, dwh)
        _receive(b, db)

    return make_op(h_all, (x, h0, c0, wx, wh, b), backward)
