"""Dense tensors with reverse-mode gradient accumulation.

Every forward operation returns a new :class:`Tensor`; when any input
requires a gradient the result records its parents and a closure that
pushes the output gradient back into them.  :func:`backward` walks the
recorded graph in reverse creation order, which is always a valid reverse
topological order because a tensor is created after all of its inputs.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_counter = itertools.count()
_grad_enabled = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_index", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._index = next(_counter)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar; shapes must match exactly (no broadcasting)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._index = next(_counter)
    out._consumed = False
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    out.grad = None
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Nodes are visited once each in descending creation index.  A graph can
    be consumed only once; call the forward pass again for a new backward.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._index in nodes:
            continue
        if t._consumed:
            raise RuntimeError("graph already consumed by a previous backward()")
        nodes[t._index] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    _acc(loss, np.ones_like(loss.data))
    for idx in sorted(nodes, reverse=True):
        t = nodes[idx]
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t in nodes.values():
        if t._backward is not None:
            t._backward = None
            t._parents = ()
            t._consumed = True


# ---------------------------------------------------------------------------
# linear maps


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W^T + b over the last axis of ``x``; W has shape (m, n)."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"affine: input shape {x.shape} does not match weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"affine: bias shape {b.shape} does not match weight shape {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def _bw(g):
        if x.requires_grad:
            _acc(x, g @ W.data)
        g2 = g.reshape(-1, g.shape[-1])
        if W.requires_grad:
            _acc(W, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            _acc(b, g2.sum(axis=0))

    return _make(out, parents, _bw)


def conv1x1(cube: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-location channel mixing of an (..., H, W, C_in) cube."""
    if W.data.ndim != 2 or cube.shape[-1] != W.shape[1]:
        raise ValueError(f"conv1x1: cube channels {cube.shape} do not match kernel {W.shape}")
    return affine(cube, W, b)


def conv2d(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution of an (H, W, C_in) map with W of shape (k, k, C_in, C_out)."""
    if x.data.ndim != 3 or W.data.ndim != 4 or x.shape[2] != W.shape[2]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {W.shape}")
    kh, kw = W.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: odd kernel sizes only")
    H, Wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((H, Wd, W.shape[3]), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[i : i + H, j : j + Wd] @ W.data[i, j]
    if b is not None:
        out += b.data
    parents = (x, W) if b is None else (x, W, b)

    def _bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if W.requires_grad:
            gW = np.empty_like(W.data)
            for i in range(kh):
                for j in range(kw):
                    gW[i, j] = xp[i : i + H, j : j + Wd].reshape(-1, xp.shape[2]).T @ g2
            _acc(W, gW)
        if b is not None and b.requires_grad:
            _acc(b, g2.sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i : i + H, j : j + Wd] += g @ W.data[i, j].T
            _acc(x, gxp[ph : ph + H, pw : pw + Wd])

    return _make(out, parents, _bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling of an (H, W, C) map; odd extents round up."""
    H, W, C = x.shape
    H2, W2 = -(-H // 2), -(-W // 2)
    xp = x.data
    if (H2 * 2, W2 * 2) != (H, W):
        xp = np.full((H2 * 2, W2 * 2, C), -np.inf, dtype=x.dtype)
        xp[:H, :W] = x.data
    win = xp.reshape(H2, 2, W2, 2, C).transpose(0, 2, 1, 3, 4).reshape(H2, W2, 4, C)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def _bw(g):
        gw = np.zeros((H2, W2, 4, C), dtype=g.dtype)
        np.put_along_axis(gw, arg[:, :, None, :], g[:, :, None, :], axis=2)
        full = gw.reshape(H2, W2, 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(H2 * 2, W2 * 2, C)
        _acc(x, full[:H, :W])

    return _make(out, (x,), _bw)


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def _bw(g):
        _acc(x, g * y * (1.0 - y))

    return _make(y, (x,), _bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def _bw(g):
        _acc(x, g * (1.0 - y * y))

    return _make(y, (x,), _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def _bw(g):
        _acc(x, g * mask)

    return _make(y, (x,), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a, getattr(b, "dtype", None)), as_tensor(b, getattr(a, "dtype", None))
    _check_same_shape(a, b, "add")

    def _bw(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def _bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if not isinstance(a, Tensor):
        return scale(b, float(a))
    _check_same_shape(a, b, "mul")

    def _bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make(a.data * b.data, (a, b), _bw)


def scale(x: Tensor, c: float) -> Tensor:
    def _bw(g):
        _acc(x, g * c)

    return _make(x.data * x.dtype.type(c), (x,), _bw)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"mul": mul, "add": add}


def elementwise(x: Tensor, kind: str, other: Tensor | None = None) -> Tensor:
    """Dispatch by name: sigmoid, tanh, relu (unary) or mul, add (binary)."""
    if kind in _UNARY:
        return _UNARY[kind](x)
    if kind in _BINARY:
        if other is None:
            raise ValueError(f"elementwise {kind!r} needs a second operand")
        return _BINARY[kind](x, other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def smooth_l1(x: Tensor) -> Tensor:
    """0.5 x^2 where |x| < 1, |x| - 0.5 elsewhere (componentwise)."""
    ax = np.abs(x.data)
    inner = ax < 1.0
    y = np.where(inner, 0.5 * x.data * x.data, ax - 0.5)

    def _bw(g):
        _acc(x, g * np.where(inner, x.data, np.sign(x.data)))

    return _make(y, (x,), _bw)


# ---------------------------------------------------------------------------
# normalisation / reductions


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        _acc(v, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (v,), _bw)


def cross_entropy(scores: Tensor, labels) -> Tensor:
    """Per-row -log softmax(scores)[label]; scores (R, C), labels (R,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if scores.data.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ValueError(f"cross_entropy: scores {scores.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise ValueError("cross_entropy: label out of range")
    s = scores.data
    m = s.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    rows = np.arange(s.shape[0])
    y = lse - s[rows, labels]

    def _bw(g):
        p = np.exp(s - lse[:, None])
        p[rows, labels] -= 1.0
        _acc(scores, p * g[:, None])

    return _make(y, (scores,), _bw)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    y = np.asarray(x.data.sum(axis=axis))

    def _bw(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.shape))
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(y, (x,), _bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def l2_normalize_scale(feat: Tensor, gamma: Tensor, batch_axes: int = 0) -> Tensor:
    """Divide each item by its global L2 norm, then scale channel d by gamma[d].

    The first ``batch_axes`` axes index independent items; the norm runs over
    all remaining axes.  All-zero items pass through as zeros.
    """
    if gamma.shape != (feat.shape[-1],):
        raise ValueError(f"l2_normalize_scale: gamma {gamma.shape} vs feature {feat.shape}")
    red = tuple(range(batch_axes, feat.data.ndim))
    norm = np.sqrt((feat.data * feat.data).sum(axis=red, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    u = feat.data / safe
    y = u * gamma.data

    def _bw(g):
        if gamma.requires_grad:
            _acc(gamma, (g * u).reshape(-1, feat.shape[-1]).sum(axis=0))
        if feat.requires_grad:
            gu = g * gamma.data
            gx = (gu - u * (gu * u).sum(axis=red, keepdims=True)) / safe
            _acc(feat, np.where(norm > 0, gx, 0.0).astype(feat.dtype, copy=False))

    return _make(y, (feat, gamma), _bw)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)

    def _bw(g):
        _acc(x, g.reshape(x.shape))

    return _make(y, (x,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _acc(t, g[tuple(sl)])

    return _make(y, tuple(tensors), _bw)


def index(x: Tensor, key) -> Tensor:
    """x[key] for basic slices or integer-array indexing."""
    y = x.data[key]
    basic = isinstance(key, (int, slice)) or (
        isinstance(key, tuple) and all(isinstance(k, (int, slice)) or k is Ellipsis for k in key)
    )

    def _bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        _acc(x, full)

    return _make(np.array(y, copy=True), (x,), _bw)


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of vector ``x`` into an (n, len(x)) matrix."""
    y = np.broadcast_to(x.data, (n,) + x.shape).copy()

    def _bw(g):
        _acc(x, g.sum(axis=0))

    return _make(y, (x,), _bw)


def attend(X: Tensor, l: Tensor, tol: float = 1e-4) -> Tensor:
    """Expectation of the rows of X (N, D) under the distribution l (N,)."""
    if l.data.ndim != 1 or X.data.ndim != 2 or X.shape[0] != l.shape[0]:
        raise ValueError(f"attend: slices {X.shape} vs map {l.shape}")
    if np.any(l.data < 0) or abs(float(l.data.sum()) - 1.0) > tol:
        raise ValueError("attend: attention map is not on the probability simplex")
    y = l.data @ X.data

    def _bw(g):
        if l.requires_grad:
            _acc(l, X.data @ g)
        if X.requires_grad:
            _acc(X, np.outer(l.data, g))

    return _make(y, (X, l), _bw)


# ---------------------------------------------------------------------------
# gradient oracle


def grad_check(f: Callable[..., Tensor], *inputs: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``f`` maps the inputs to a scalar tensor.  Inputs should be float64.
    The error per component is |a - n| / max(1e-8, |a| + |n|).
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            af = a.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = f(*inputs).item()
                flat[k] = orig - eps
                dn = f(*inputs).item()
                flat[k] = orig
                num = (up - dn) / (2 * eps)
                err = abs(af[k] - num) / max(1e-8, abs(af[k]) + abs(num))
                worst = max(worst, err)
    return worst
