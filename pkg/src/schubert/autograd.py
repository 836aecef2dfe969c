"""Dense tensors with tape-based reverse-mode differentiation.

Only what the encoder and the pruning loop need is here: broadcasting
arithmetic, batched matmul, reshapes, gathers, softmax, layer norm, GELU,
tanh and a fused softmax cross-entropy.  Values live in numpy arrays;
float32 is the default and float64 can be switched on for gradient checks,
either with :func:`default_dtype` or by exporting ``SCHUBERT_FLOAT64=1``
before import.
"""
from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

GELU_COEF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)

_state = {
    "dtype": np.float64 if os.environ.get("SCHUBERT_FLOAT64") == "1" else np.float32,
    "grad_enabled": True,
    "mac_counter": None,
}


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    pass


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


@dataclass
class MacCounter:
    """Multiply-accumulate tally filled in by :func:`matmul`."""

    total: int = 0
    calls: list = field(default_factory=list)

    def add(self, n, shapes):
        self.total += n
        self.calls.append((n, shapes))


@contextlib.contextmanager
def count_macs():
    old = _state["mac_counter"]
    counter = MacCounter()
    _state["mac_counter"] = counter
    try:
        yield counter
    finally:
        _state["mac_counter"] = old


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """An array plus the bookkeeping needed to backpropagate into it.

    Leaves created with ``requires_grad=True`` collect ``.grad`` across
    :meth:`backward` calls until :meth:`zero_grad`; interior nodes keep their
    parents and backward closure only until the tape is consumed.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        if _op == "leaf":
            data = np.array(data, dtype=_state["dtype"])
            _check_finite(data, "tensor construction")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basic introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def abs(self):
        return tabs(self)

    def tanh(self):
        return tanh(self)

    def backward(self):
        return backward(self)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _state["dtype"]
    return Tensor(np.asarray(x, dtype=dtype), _op="const")


def _node(data, parents, backward_fn, op):
    _check_finite(data, op)
    track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------------
def add(a, b):
    a, b = _lift(a), _lift(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def mul(a, b):
    a = _lift(a)
    b = _lift(b, a)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "mul")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a):
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def tabs(a):
    # subgradient of |x| at 0 is taken as 0
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a):
    """Tanh-approximated GELU: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = a.data
    inner = GELU_SCALE * (x + GELU_COEF * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), bw, "gelu")


# -- shape manipulation -----------------------------------------------------------
def reshape(a, shape):
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.data.dtype)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (a,), bw, "getitem")


def embedding(table, ids):
    """Row gather ``table[ids]`` with range checking."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range [0, {table.shape[0]}): min={ids.min()} max={ids.max()}")
    return getitem(table, ids)


def tsum(a, axis=None, keepdims=False):
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- linear algebra ---------------------------------------------------------------
def _mm(x, y):
    if y.ndim == 2 and x.ndim > 2:
        # one GEMM over the flattened batch beats numpy's per-matrix loop
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(*x.shape[:-1], y.shape[-1])
    return np.matmul(x, y)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _mm(a.data, b.data)
    counter = _state["mac_counter"]
    if counter is not None:
        counter.add(int(np.prod(out.shape)) * a.shape[-1], (a.shape, b.shape))

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold batch axes into one GEMM instead of broadcasting
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


# -- normalisation and losses -------------------------------------------------------
def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``.

    ``mask`` (broadcastable booleans, True = keep) stands in for -inf logits
    so tensors stay finite; slices with nothing kept come out all zero.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0).astype(x.data.dtype, copy=False)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def layer_norm(x, gain, shift, eps=1e-12, mask=None):
    """Normalise the last axis to zero mean and unit population variance.

    With ``mask`` (1-D booleans over the last axis) the statistics use only
    the kept units and dropped units output ``shift``; this is what makes a
    zeroed hidden unit behave exactly like a deleted one.
    """
    data = x.data
    # statistics in float64: centring nearly equal float32 values cancels badly
    wide = data.astype(np.float64)
    if mask is None:
        n = data.shape[-1]
        xc = wide - wide.mean(axis=-1, keepdims=True)
        var = (xc * xc).mean(axis=-1, keepdims=True)
        m = None
    else:
        m = np.asarray(mask, dtype=data.dtype)
        n = m.sum()
        mu = (wide * m).sum(axis=-1, keepdims=True) / n
        xc = (wide - mu) * m
        var = (xc * xc).sum(axis=-1, keepdims=True) / n
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).astype(data.dtype, copy=False)
    rstd = rstd.astype(data.dtype, copy=False)
    out = xhat * gain.data + shift.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            if m is not None:
                dxhat = dxhat * m
            mean_d = dxhat.sum(axis=-1, keepdims=True) / n
            mean_dx = (dxhat * xhat).sum(axis=-1, keepdims=True) / n
            gx = rstd * (dxhat - mean_d - xhat * mean_dx)
            if m is not None:
                gx = gx * m
        ggain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gshift = _unbroadcast(g, shift.shape) if shift.requires_grad else None
        return gx, ggain, gshift

    return _node(out.astype(data.dtype, copy=False), (x, gain, shift), bw, "layer_norm")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    An empty target list gives a constant 0 so batches without masked tokens
    are harmless.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n = targets.size
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype), _op="const")
    if logits.ndim != 2 or logits.shape[0] != n:
        raise DimensionError(f"cross_entropy expects [{n}, V] logits, got {logits.shape}")
    vocab = logits.shape[1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target out of range [0, {vocab})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    out = np.asarray(-logp[rows, targets].mean(), dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _node(out, (logits,), bw, "cross_entropy")


# -- reverse pass -----------------------------------------------------------------
def tape_nodes(root):
    """Graph nodes reachable from ``root`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss):
    """Backpropagate from a scalar, accumulating ``.grad`` on leaves.

    Repeated calls add to existing leaf gradients.  The tape is released on
    the way out.  Returns the number of nodes visited.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable tensor")
    order = tape_nodes(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    visited = 0
    for node in reversed(order):
        g = grads.pop(id(node), None)
        visited += 1
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    return visited


# -- optimiser -----------------------------------------------------------------------
@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-6):
    """One bias-corrected Adam update on plain arrays; returns ``(params, state)``."""
    if len(params) != len(state.m):
        raise DimensionError("optimizer state does not match parameter list")
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise DimensionError(f"state shape {m.shape} != param shape {p.shape}")
        g = np.zeros_like(p) if g is None else g
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_p, AdamState(new_m, new_v, t)


class Adam:
    """In-place Adam over a list of leaf tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-6):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self):
        new, self.state = adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )
        for p, d in zip(self.params, new):
            _check_finite(d, "adam_step")
            p.data = d

    def zero_grad(self):
        for p in self.params:
            p.grad = None
