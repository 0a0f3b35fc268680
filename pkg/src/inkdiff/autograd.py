"""Dense tensors with reverse-mode differentiation on top of numpy.

Every op builds a node only when one of its inputs requires a gradient, so
sampling under :func:`no_grad` costs no graph memory. Gradients accumulate
(sum semantics) into ``Tensor.grad`` and must be cleared between steps with
:func:`zero_grad`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECKED = False


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch precision, e.g. ``with default_dtype(np.float64):``."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def checked():
    """Raise ``FloatingPointError`` as soon as any op produces NaN or Inf."""
    global _CHECKED
    old = _CHECKED
    _CHECKED = True
    try:
        yield
    finally:
        _CHECKED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) and dtype is None:
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim > 0 and arr.size == 0:
            raise ValueError("tensors must have at least one element")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant that is not part of the graph."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c), "scale")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: _accum(a, 2.0 * a.data * g), "square")


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(s, (a,), lambda g: _accum(a, g * s * (1.0 - s)), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _make(a.data * s, (a,), backward, "silu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: _accum(a, g * mask), "relu")


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.data.shape)), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: _accum(a, g.transpose(inv)), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"row id out of range for table with {table.data.shape[0]} rows")

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _accum(table, dt)

    return _make(table.data[ids], (table,), backward, "take_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` is (d_out, d_in)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear expects last dim {w.shape[1]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        _accum(x, (g2 @ w.data).reshape(x.shape))
        _accum(w, g2.T @ x2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    return _make(out.reshape(lead + (w.shape[0],)), parents, backward, "linear")


# ---------------------------------------------------------------- normalised outputs


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), backward, "softmax")


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where ``mask == False`` entries get exactly zero weight.

    A slice with no unmasked entries yields all zeros.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    z = np.where(mask, a.data, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(np.where(mask, a.data - zmax, 0.0)), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    y = (e / np.where(total > 0, total, 1.0)).astype(a.dtype, copy=False)

    def backward(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), backward, "masked_softmax")


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        _accum(a, d)
        _accum(b, -d)

    return _make(np.asarray(np.mean(diff * diff)), (a, b), backward, "mse")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accum(logits, g * p / n)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- image ops


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (c, h, w) or (n, c, h, w), got {x.shape}")
    return x, False


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is (c_in, h, w) or (n, c_in, h, w); ``kernels`` is (c_out, c_in, kh, kw).
    Output size per axis is ``(h + 2*padding - kh) / stride + 1`` and must be integral.
    """
    x, squeeze = _as_batch(as_tensor(x))
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernels.shape
    if c_in != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernels {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernels must have odd spatial size")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ValueError("conv2d output size is not integral for this stride/padding")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d kernel larger than padded input")
    if kh == kw == 1 and stride == 1 and padding == 0:
        out_t = _conv1x1(x, kernels, bias)
    elif stride == 1:
        out_t = _conv_shift(x, kernels, bias, padding, ho, wo)
    else:
        out_t = _conv_im2col(x, kernels, bias, stride, padding, ho, wo)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def _conv1x1(x, kernels, bias):
    n, c, h, w = x.shape
    c_out = kernels.shape[0]
    wmat = kernels.data.reshape(c_out, c)
    flat = x.data.reshape(n, c, h * w)
    out = wmat @ flat
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        g2 = g.reshape(n, c_out, h * w)
        if kernels.requires_grad:
            _accum(kernels, np.einsum("noq,ncq->oc", g2, flat).reshape(kernels.shape))
        if bias is not None:
            _accum(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            _accum(x, (wmat.T @ g2).reshape(x.shape))

    return _make(out.reshape(n, c_out, h, w), parents, backward, "conv2d")


_CHUNK_ELEMS = 1 << 18


def _shift_patches(xp, c, kh, kw, wp, q):
    n = xp.shape[0]
    cols = np.empty((n, c, kh, kw, q), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            cols[:, :, i, j, :] = xp[:, :, off : off + q]
    return cols.reshape(n, c * kh * kw, q)


def _conv_shift(x, kernels, bias, padding, ho, wo):
    # Each padded plane is flattened; kernel offset (i, j) is then a contiguous
    # shift by i*wp + j, so the patch matrix is built from 1-D slices and one
    # GEMM per image. Columns past wo in each output row are discarded.
    n, c, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    q = ho * wp
    length = hp * wp + kw
    dtype = np.result_type(x.data, kernels.data)
    xp = np.zeros((n, c, length), dtype=dtype)
    xp[:, :, : hp * wp].reshape(n, c, hp, wp)[:, :, padding : padding + h, padding : padding + w] = x.data
    wmat = kernels.data.reshape(c_out, -1).astype(dtype, copy=False)
    parents = (x, kernels) if bias is None else (x, kernels, bias)
    needs_graph = _GRAD_ENABLED and any(p.requires_grad for p in parents)

    out = np.empty((n, c_out, ho, wo), dtype=dtype)
    chunk = max(1, _CHUNK_ELEMS // (c * kh * kw * q))
    cols = None
    if needs_graph:
        cols = _shift_patches(xp, c, kh, kw, wp, q)
    for s in range(0, n, chunk):
        part = cols[s : s + chunk] if cols is not None else _shift_patches(xp[s : s + chunk], c, kh, kw, wp, q)
        res = wmat @ part
        if bias is not None:
            res += bias.data[:, None]
        out[s : s + chunk] = res.reshape(-1, c_out, ho, wp)[:, :, :, :wo]

    def backward(g):
        gq = np.zeros((n, c_out, ho, wp), dtype=g.dtype)
        gq[:, :, :, :wo] = g
        gq = gq.reshape(n, c_out, q)
        if kernels.requires_grad:
            gflat = np.ascontiguousarray(gq.transpose(1, 0, 2)).reshape(c_out, n * q)
            cflat = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(-1, n * q)
            _accum(kernels, (gflat @ cflat.T).reshape(kernels.shape))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (wmat.T @ gq).reshape(n, c, kh, kw, q)
            dxp = np.zeros((n, c, length), dtype=dcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    dxp[:, :, off : off + q] += dcols[:, :, i, j, :]
            dx = dxp[:, :, : hp * wp].reshape(n, c, hp, wp)[:, :, padding : padding + h, padding : padding + w]
            _accum(x, dx)

    return _make(out, parents, backward, "conv2d")


def _conv_im2col(x, kernels, bias, stride, padding, ho, wo):
    n, c, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=np.result_type(x.data, kernels.data))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if kernels.requires_grad:
            _accum(kernels, (g2.T @ cols).reshape(c_out, kh, kw, c).transpose(0, 3, 1, 2))
        if bias is not None:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            _accum(x, dxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2))

    return _make(out, parents, backward, "conv2d")


def group_norm(x: Tensor, groups: int, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, squeeze = _as_batch(as_tensor(x))
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat
    if gain is not None:
        out = out * gain.data.reshape(1, c, 1, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1)
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def backward(g):
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if gain is not None:
            _accum(gain, (g * xhat).sum(axis=(0, 2, 3)))
            g = g * gain.data.reshape(1, c, 1, 1)
        if x.requires_grad:
            gh = g.reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            dx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
            _accum(x, dx.reshape(n, c, h, w))

    out_t = _make(out, parents, backward, "group_norm")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2 needs even spatial dims")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        _accum(x, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _make(out, (x,), backward, "avg_pool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of (n, c, h, w)."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out, (x,), backward, "upsample2")


# ---------------------------------------------------------------- backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    Interior nodes release their gradient once it has been propagated.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    indices: Sequence[tuple] | None = None,
) -> float:
    """Worst relative error between backward() and central differences.

    ``indices`` restricts the finite-difference probe to selected elements
    (default: every element). Relative error uses an absolute floor of 1e-8.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    y = f(x)
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst = 0.0
    with no_grad():
        for idx in indices:
            orig = x.data[idx].copy()
            x.data[idx] = orig + eps
            fp = float(f(x).data)
            x.data[idx] = orig - eps
            fm = float(f(x).data)
            x.data[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    x.requires_grad = was
    return worst


def directional_grad_check(
    f: Callable[[], Tensor],
    tensors: dict,
    directions: int = 3,
    eps: float = 3e-3,
    seed: int = 0,
) -> tuple[float, str]:
    """Worst relative error of directional derivatives along random unit vectors.

    For each named tensor, ``grad . v`` from one backward pass is compared with
    a five-point central difference of ``f`` along ``v``. Per-element checks of
    a deep composite drown in roundoff wherever a gradient entry is tiny; a
    random direction mixes all entries so the derivative being checked has the
    size of the whole gradient. Returns ``(error, tensor name)``.
    """
    rng = np.random.default_rng(seed)
    saved = {k: t.requires_grad for k, t in tensors.items()}
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    backward(f())
    grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}
    worst = (0.0, "")
    with no_grad():
        for name, t in tensors.items():
            orig = t.data.copy()
            for _ in range(directions):
                v = rng.normal(size=t.shape)
                v /= np.linalg.norm(v)
                vals = []
                for step in (2.0, 1.0, -1.0, -2.0):
                    t.data = (orig + step * eps * v).astype(orig.dtype)
                    vals.append(float(f().data))
                t.data = orig
                numeric = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * eps)
                analytic = float(np.sum(grads[name] * v))
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                if err > worst[0]:
                    worst = (err, name)
    for k, t in tensors.items():
        t.requires_grad = saved[k]
        t.grad = None
    return worst
