"""Dense float64 tensors with reverse-mode differentiation.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them. ``backward`` linearises the graph into a
:class:`Tape` (parents always precede children) and walks it in reverse.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis: int):
        return reduce_max(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> "Tape":
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True, order="C")
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- tape

class Tape:
    """Topologically ordered record of the nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.requires_grad and not n._parents]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> Tape:
    """Populate ``.grad`` on every requires_grad node reachable from ``root``.

    Gradients are reset before the sweep, so repeated calls do not accumulate.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = Tape.record(root)
    for n in tape.nodes:
        n.grad = None
    root.grad = np.ones_like(root.data)
    for n in reversed(tape.nodes):
        if n._backward is not None and n.grad is not None:
            n._backward(n.grad)
    return tape


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), "neg", lambda g: _accumulate(a, -g))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _node(a.data ** p, (a,), "pow", bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: _accumulate(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), "log", lambda g: _accumulate(a, g / a.data))


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _node(np.where(keep, a.data, 0.0), (a,), "relu", lambda g: _accumulate(a, g * keep))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), "sigmoid", lambda g: _accumulate(a, g * out * (1.0 - out)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", bw)


# ---------------------------------------------------------------- reductions

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), "sum", bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _node(out, (a,), "mean", bw)


def reduce_max(a, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first (lowest-index) argmax."""
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    if a.shape[ax] == 0:
        raise ShapeError("reduce_max over an empty axis")
    idx = np.expand_dims(a.data.argmax(axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax).squeeze(ax)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        _accumulate(a, full)

    return _node(out, (a,), "max", bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=ax, keepdims=True)))

    return _node(out, (a,), "softmax", bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    prob = np.exp(out)

    def bw(g):
        _accumulate(a, g - prob * g.sum(axis=ax, keepdims=True))

    return _node(out, (a,), "log_softmax", bw)


def cross_entropy(logits, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, c) logits, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        _accumulate(logits, g * d / b)

    return _node(np.asarray(loss), (logits,), "cross_entropy", bw)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _node(out, (a,), "reshape", lambda g: _accumulate(a, g.reshape(a.shape)))


def take(a, indices, axis: int) -> Tensor:
    """Select ``indices`` along ``axis`` (duplicates allowed; gradients add up)."""
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1 and idx.size and np.all(np.diff(idx) == 1) and idx[0] >= 0:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(int(idx[0]), int(idx[-1]) + 1)
        sl = tuple(sl)

        def bw_slice(g):
            full = np.zeros_like(a.data)
            full[sl] = g
            _accumulate(a, full)

        return _node(a.data[sl], (a,), "take", bw_slice)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        _accumulate(a, full)

    return _node(np.take(a.data, idx, axis=ax), (a,), "take", bw)


def pick(a, index) -> Tensor:
    """Row-wise gather: ``out[b] = a[b, index[b]]`` for a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        _accumulate(a, full)

    return _node(a.data[rows, idx], (a,), "pick", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = _axis(axis, out.ndim)

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=ax))

    return _node(out, ts, "stack", bw)


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (B, C, Hp, Wp) -> (B, C, Ho, Wo, k, k) view
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, (B,Cin,H,W) * (Cout,Cin,k,k) -> (B,Cout,H',W')."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    if kh != kw:
        raise ShapeError(f"square kernels only, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    k = kh
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride)
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.einsum("bcijxy,ocxy->boij", cols, kernel.data, optimize=True)

    def bw(g):
        # a fixed memory layout keeps einsum's summation order, and so the result, path-independent
        g = np.ascontiguousarray(g)
        if kernel.requires_grad:
            _accumulate(kernel, np.einsum("boij,bcijxy->ocxy", g, cols, optimize=True))
        if x.requires_grad:
            gp = np.zeros_like(xp)
            span_h = stride * (ho - 1) + 1
            span_w = stride * (wo - 1) + 1
            for di in range(k):
                for dj in range(k):
                    contrib = np.einsum("boij,oc->bcij", g, kernel.data[:, :, di, dj], optimize=True)
                    gp[:, :, di:di + span_h:stride, dj:dj + span_w:stride] += contrib
            if padding:
                gp = gp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, gp)

    return _node(out, (x, kernel), "conv2d", bw)


# ---------------------------------------------------------------- checking

def finite_difference_check(f: Callable[[Tensor], Tensor], x: np.ndarray | Tensor,
                            step: float = 1e-5, tie_break: float = 1e-3,
                            seed: int = 0) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``x`` is first jittered by uniform noise of half-width ``tie_break`` so
    that max-reductions do not sit on a kink. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    if tie_break:
        base = base + np.random.default_rng(seed).uniform(-tie_break, tie_break, base.shape)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(Tensor(base)).item()
        flat[i] = orig - step
        down = f(Tensor(base)).item()
        flat[i] = orig
        nflat[i] = (up - down) / (2.0 * step)

    bad = ~(np.isfinite(analytic) & np.isfinite(numeric))
    if bad.any():
        where = int(np.flatnonzero(bad.reshape(-1))[0])
        raise NumericalError(f"non-finite gradient at flat coordinate {where}")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def parameters_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Like :func:`finite_difference_check` but perturbs existing leaves in place."""
    params = list(params)
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            if not (math.isfinite(num) and math.isfinite(af[i])):
                raise NumericalError(f"non-finite gradient in parameter of shape {p.shape} at {i}")
            worst = max(worst, abs(af[i] - num) / max(1.0, abs(num)))
    return worst
