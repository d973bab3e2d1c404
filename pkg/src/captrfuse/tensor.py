"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable primitive the pipeline needs lives here. Besides the
operations with their own functions (``matmul``, ``softmax``, ``layer_norm``,
``relu``, ``dropout``, ``masked_cross_entropy``) the module provides
``add``/``sub``/``mul`` (broadcasting only the way bias and mask terms need),
``scale``, ``concat``, ``transpose``, ``embedding``, ``mean``, ``sum``,
``tanh``, ``conv2d`` and indexing. Each op records its parents and a closure
that pushes the output gradient back; ``Tensor.backward`` walks the recorded
graph in reverse topological order.

Precision defaults to float32. Wrap code in ``with precision("f64"):`` for
gradient checks; parameters created inside the block are float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32, "grad_enabled": True}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default float width ("f32" or "f64")."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    old = _state["dtype"]
    _state["dtype"] = _DTYPES[name]
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference over frozen parameters)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    """n-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
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

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def backward(self):
        backward(self)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a, get_dtype()), as_tensor(b, get_dtype())
    _check_broadcast(a, b, "add")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a, get_dtype()), as_tensor(b, get_dtype())
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a, get_dtype()), as_tensor(b, get_dtype())
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(x, c):
    c = float(c)

    def bw(g):
        _accumulate(x, g * c)

    return _make(x.data * x.data.dtype.type(c), (x,), bw)


def relu(x):
    """max(0, x); the subgradient at exactly 0 is 0."""
    keep = x.data > 0

    def bw(g):
        _accumulate(x, g * keep)

    # np.maximum propagates NaN, so divergence stays visible downstream
    return _make(np.maximum(x.data, 0).astype(x.data.dtype), (x,), bw)


def tanh(x):
    y = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1 - y * y))

    return _make(y, (x,), bw)


def exp(x):
    y = np.exp(x.data)

    def bw(g):
        _accumulate(x, g * y)

    return _make(y, (x,), bw)


def log(x):
    def bw(g):
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def transpose(x):
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {x.shape}")

    def bw(g):
        _accumulate(x, g.T)

    return _make(np.array(x.data.T, order="C"), (x,), bw)


def reshape(x, shape):
    def bw(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def getitem(x, idx):
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _make(np.array(x.data[idx], order="C"), (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}"
        ) from None
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(data, tuple(tensors), bw)


def embedding(table, ids):
    """Rows of ``table`` selected by integer ``ids``; gradient scatters back."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _make(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def softmax(x, axis=-1):
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        p = np.exp(y)
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(y, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5, axis=-1):
    """Normalize ``x`` along ``axis`` to zero mean and unit population variance,
    then apply the affine ``gamma * xhat + beta``.

    ``gamma`` and ``beta`` must broadcast against ``x`` with the normalized
    axis as their only non-singleton dimension.
    """
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    n = x.data.shape[axis]
    if gamma.data.size != n or beta.data.size != n:
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match "
            f"normalized dimension {n}"
        )
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gshape = [1] * x.ndim
    gshape[axis] = n
    gam = gamma.data.reshape(gshape)
    out = gam * xhat + beta.data.reshape(gshape)

    def bw(g):
        if gamma.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
            _accumulate(gamma, (g * xhat).sum(axis=red).reshape(gamma.shape))
            _accumulate(beta, g.sum(axis=red).reshape(beta.shape))
        elif beta.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
            _accumulate(beta, g.sum(axis=red).reshape(beta.shape))
        if x.requires_grad:
            gh = g * gam
            dx = inv * (
                gh
                - gh.mean(axis=axis, keepdims=True)
                - xhat * (gh * xhat).mean(axis=axis, keepdims=True)
            )
            _accumulate(x, dx)

    return _make(out, (x, gamma, beta), bw)


def dropout(x, p, training, rng=None):
    """Inverted dropout. Identity when not training or ``p == 0``."""
    if not 0 <= p <= 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if p >= 1:
        raise ValueError("dropout probability 1 is not allowed in training mode")
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit seeded rng")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1 - p)

    def bw(g):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), bw)


def masked_cross_entropy(logits, targets, mask):
    """Sum over masked-in rows of ``-log softmax(logits[i])[targets[i]]``.

    Masked-out rows contribute exactly zero, both to the value and to the
    gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"masked_cross_entropy expects l x V logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n, vocab = logits.shape
    if targets.shape != (n,) or mask.shape != (n,):
        raise ShapeError(
            f"masked_cross_entropy: logits {logits.shape}, targets {targets.shape}, "
            f"mask {mask.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of vocabulary range [0, {vocab})")
    rows = np.flatnonzero(mask)
    dt = logits.data.dtype
    if rows.size == 0:
        return _make(np.zeros((), dtype=dt), (logits,), lambda g: None)
    z = logits.data[rows] - logits.data[rows].max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.size), targets[rows]]

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(rows.size), targets[rows]] -= 1
        full = np.zeros_like(logits.data)
        full[rows] = p * g
        _accumulate(logits, full)

    # fsum rounds once, so k equal terms sum to exactly k * term
    return _make(np.asarray(math.fsum(nll.tolist()), dtype=dt), (logits,), bw)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, k, stride, pad):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, ho, wo), strides=(s0, s1, s2, s1 * stride, s2 * stride)
    )
    return cols.reshape(c * k * k, ho * wo), ho, wo


def conv2d(x, weight, bias, stride=1, padding=0):
    """Single-image 2-d convolution. x: C×H×W, weight: O×C×k×k, bias: O."""
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    o, c, k, _ = weight.shape
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols + bias.data[:, None]).reshape(o, ho, wo)
    h, w = x.shape[1:]

    def bw(g):
        g2 = g.reshape(o, -1)
        if weight.requires_grad:
            _accumulate(weight, (g2 @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, k, k, ho, wo)
            dxp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, i, j
                    ]
            _accumulate(x, dxp[:, padding : padding + h, padding : padding + w])

    return _make(out, (x, weight, bias), bw)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing buffers; call ``zero_grad`` between
    steps. Intermediate buffers are released once consumed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    # intermediates get fresh buffers; leaves keep accumulating
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    failures: list = field(default_factory=list)  # (param index, flat index, analytic, numeric)
    checked: int = 0

    @property
    def passed(self):
        return not self.failures


def relative_error(analytic, numeric, floor=1e-3):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients
    from turning finite-difference round-off into huge ratios."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f, params, eps=1e-4, tol=1e-4, max_entries=None, rng=None, analytic=None):
    """Compare analytic gradients of ``f(params)`` with central differences.

    ``f`` must be deterministic. When ``max_entries`` is set, that many entries
    per parameter are sampled with ``rng`` instead of checking every one.
    ``analytic`` optionally overrides the gradients under test (a list of
    arrays aligned with ``params``), which is how negative controls inject a
    corrupted gradient.
    """
    for p in params:
        p.grad = None
    loss = f(params)
    backward(loss)
    grads = analytic if analytic is not None else [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]
    report = GradCheckReport(max_rel_error=0.0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        gflat = np.asarray(grads[pi]).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f(params).data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f(params).data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = relative_error(float(gflat[i]), numeric)
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, err)
            if err > tol:
                report.failures.append((pi, int(i), float(gflat[i]), numeric))
    for p in params:
        p.grad = None
    return report
