"""Dense tensors with reverse-mode automatic differentiation.

Values are stored row-major as 32-bit floats (64-bit when a caller builds
64-bit leaves, e.g. for tighter gradient checks).  Reductions and the softmax
normalizer accumulate in 64-bit before rounding back to the storage dtype.

Every operation that participates in differentiation records its parents and
a closure that scatters the output gradient back to them; ``Tensor.backward``
walks the recorded graph exactly once in reverse topological order and
accumulates (adds) gradients at fan-out points.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """A numpy array plus an optional gradient and autodiff bookkeeping."""

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed requires a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise DimensionError("seed gradient shape", grad.shape, self.data.shape)

        # Iterative post-order walk; graphs get deep enough that recursion
        # would hit the interpreter limit.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        _accumulate(self, grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        data = self.data[key]

        def backward(g):
            gx = np.zeros_like(self.data)
            gx[key] += g
            _accumulate(self, gx)

        return _make(data, (self,), backward)

    # -- method sugar ----------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _lift(value, like: np.dtype | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if like is not None and arr.dtype != like:
        arr = arr.astype(like)
    return Tensor(arr)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, getattr(a, "dtype", None))
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, getattr(a, "dtype", None))
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, getattr(a, "dtype", None))
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def power(x, exponent: float) -> Tensor:
    x = _lift(x)
    p = float(exponent)
    data = np.power(x.data, p)

    def backward(g):
        if p == 0.0:
            return
        _accumulate(x, g * p * np.power(x.data, p - 1.0))

    return _make(data, (x,), backward)


def maximum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, getattr(a, "dtype", None))
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _make(data, (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, getattr(a, "dtype", None))
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _make(data, (a, b), backward)


def exp(x) -> Tensor:
    x = _lift(x)
    data = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * data)

    return _make(data, (x,), backward)


def log(x) -> Tensor:
    x = _lift(x)
    data = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(data, (x,), backward)


def sqrt(x) -> Tensor:
    x = _lift(x)
    data = np.sqrt(x.data)

    def backward(g):
        _accumulate(x, g * (0.5 / data))

    return _make(data, (x,), backward)


def absolute(x) -> Tensor:
    x = _lift(x)
    data = np.abs(x.data)

    def backward(g):
        _accumulate(x, g * np.sign(x.data))

    return _make(data, (x,), backward)


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0).astype(x.data.dtype)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _lift(x)
    data = _stable_sigmoid(x.data)

    def backward(g):
        _accumulate(x, g * data * (1.0 - data))

    return _make(data, (x,), backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) computed without overflow for any finite input."""
    x = _lift(x)
    data = (np.minimum(x.data, 0.0) - np.log1p(np.exp(-np.abs(x.data)))).astype(x.data.dtype)

    def backward(g):
        _accumulate(x, g * _stable_sigmoid(-x.data))

    return _make(data, (x,), backward)


# -- shape plumbing ---------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    orig = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(orig))

    return _make(data, (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = _lift(x)
    data = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _make(data, (x,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_lift(t) for t in tensors]
    if not parts:
        raise ContractError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        start = 0
        for p, size in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + size)
            _accumulate(p, g[tuple(index)])
            start += size

    return _make(data, tuple(parts), backward)


def take_rows(x, indices) -> Tensor:
    """Gather rows along axis 0.  Gradient scatters (and accumulates) back."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError(f"take_rows wants a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ContractError(f"take_rows index out of range for {x.data.shape[0]} rows")
    data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _make(data, (x,), backward)


# -- reductions -------------------------------------------------------------


def _restore_axes(g: np.ndarray, axis, shape):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    data = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        if not keepdims:
            g = _restore_axes(g, axis, x.data.shape)
        else:
            g = np.broadcast_to(g, x.data.shape)
        _accumulate(x, g)

    return _make(data, (x,), backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


# -- dense building blocks --------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias with weight laid out [d_in, d_out]."""
    x, weight = _lift(x), _lift(weight)
    if x.data.shape[-1] != weight.data.shape[0]:
        raise DimensionError("linear input vs weight", x.data.shape, weight.data.shape)
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError("matmul operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError("matmul inner dimensions", a.data.shape, b.data.shape)
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; the normalizer is accumulated in 64-bit."""
    x = _lift(x)
    z = x.data.astype(np.float64, copy=False)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = (e / e.sum(axis=axis, keepdims=True)).astype(x.data.dtype)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, data * (g - inner))

    return _make(data, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError("layer_norm feature width", x.data.shape, gain.data.shape)
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    centered = x.data.astype(np.float64, copy=False) - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv).astype(x.data.dtype)
    inv = inv.astype(x.data.dtype)
    data = xhat * gain.data + bias.data

    def backward(g):
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gain, bias), backward)


def bilinear_sample(fmap, points) -> Tensor:
    """Sample a [H, W, C] map at normalized (x, y) points, shape [..., 2].

    Coordinates follow the align-corners convention: x=0 hits column 0 and
    x=1 hits column W-1.  Samples outside the map read zeros.  Gradients flow
    to both the map and the points.

    A [B, H, W, C] map batches B independent maps; the points must then be
    [B, ..., 2] and each batch row samples only its own map.
    """
    fmap, points = _lift(fmap), _lift(points)
    if fmap.data.ndim not in (3, 4):
        raise ContractError(
            f"bilinear_sample expects a [H, W, C] or [B, H, W, C] map, "
            f"got {fmap.data.shape}"
        )
    if points.data.shape[-1] != 2:
        raise ContractError(f"bilinear_sample points must end in 2, got {points.data.shape}")
    batched = fmap.data.ndim == 4
    if batched and points.data.shape[0] != fmap.data.shape[0]:
        raise ContractError(
            f"batched points must lead with {fmap.data.shape[0]}, "
            f"got {points.data.shape}"
        )
    B = fmap.data.shape[0] if batched else 1
    H, W, C = fmap.data.shape[-3:]
    lead = points.data.shape[:-1]
    fdata = fmap.data.reshape(B, H, W, C)
    pts = points.data.reshape(B, -1, 2).astype(np.float64)
    px = pts[..., 0] * (W - 1)
    py = pts[..., 1] * (H - 1)
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1
    wx = (px - x0).astype(fmap.data.dtype)
    wy = (py - y0).astype(fmap.data.dtype)
    rows = np.arange(B, dtype=np.intp)[:, None]

    def corner(xi, yi):
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        v = fdata[rows, np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
        return np.where(valid[..., None], v, 0.0).astype(fmap.data.dtype), valid

    v00, m00 = corner(x0, y0)
    v01, m01 = corner(x1, y0)
    v10, m10 = corner(x0, y1)
    v11, m11 = corner(x1, y1)
    w00 = ((1 - wx) * (1 - wy))[..., None]
    w01 = (wx * (1 - wy))[..., None]
    w10 = ((1 - wx) * wy)[..., None]
    w11 = (wx * wy)[..., None]
    data = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).reshape(*lead, C)

    def backward(g):
        gf = g.reshape(B, -1, C)
        if fmap.requires_grad:
            gmap = np.zeros_like(fdata)
            bb = np.broadcast_to(rows, x0.shape)
            for xi, yi, m, w in ((x0, y0, m00, w00), (x1, y0, m01, w01),
                                 (x0, y1, m10, w10), (x1, y1, m11, w11)):
                contrib = gf * w
                np.add.at(gmap, (bb[m], yi[m], xi[m]), contrib[m])
            _accumulate(fmap, gmap.reshape(fmap.data.shape))
        if points.requires_grad:
            dpx = ((1 - wy)[..., None] * (v01 - v00) + wy[..., None] * (v11 - v10)) * gf
            dpy = ((1 - wx)[..., None] * (v10 - v00) + wx[..., None] * (v11 - v01)) * gf
            gp = np.stack([dpx.sum(axis=-1) * (W - 1), dpy.sum(axis=-1) * (H - 1)],
                          axis=-1)
            _accumulate(points, gp.reshape(points.data.shape).astype(points.data.dtype))

    return _make(data, (fmap, points), backward)


def conv2d(x, weight, bias, stride: int = 1) -> Tensor:
    """2-D convolution on a [H, W, Cin] map with a [kh, kw, Cin, Cout] kernel.

    Edge-replicate padding keeps spatially constant inputs constant; output
    extent is ceil(H / stride) x ceil(W / stride).  A [B, H, W, Cin] input
    convolves B maps with the same kernel in one call.
    """
    x, weight, bias = _lift(x), _lift(weight), _lift(bias)
    if x.data.ndim not in (3, 4) or weight.data.ndim != 4:
        raise ContractError(
            "conv2d expects [H,W,Cin] or [B,H,W,Cin] input "
            "and [kh,kw,Cin,Cout] kernel"
        )
    if x.data.shape[-1] != weight.data.shape[2]:
        raise DimensionError("conv2d channels", x.data.shape, weight.data.shape)
    batched = x.data.ndim == 4
    B = x.data.shape[0] if batched else 1
    H, W, cin = x.data.shape[-3:]
    kh, kw, _, cout = weight.data.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x.data.reshape(B, H, W, cin),
                ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # [B, Ho, Wo, Cin, kh, kw]
    ho, wo = windows.shape[1], windows.shape[2]
    patches = windows.transpose(0, 1, 2, 4, 5, 3).reshape(B * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out_shape = (B, ho, wo, cout) if batched else (ho, wo, cout)
    data = (patches @ wmat + bias.data).reshape(out_shape)

    def backward(g):
        gflat = g.reshape(B * ho * wo, cout)
        if bias.requires_grad:
            _accumulate(bias, gflat.sum(axis=0))
        if weight.requires_grad:
            gw = patches.T @ gflat
            _accumulate(weight, gw.reshape(kh, kw, cin, cout))
        if x.requires_grad:
            gcols = (gflat @ wmat.T).reshape(B, ho, wo, kh, kw, cin)
            gp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gp[:, a:a + stride * ho:stride,
                       b:b + stride * wo:stride] += gcols[:, :, :, a, b]
            if ph:
                gp[:, ph] += gp[:, :ph].sum(axis=1)
                gp[:, -ph - 1] += gp[:, -ph:].sum(axis=1)
            if pw:
                gp[:, :, pw] += gp[:, :, :pw].sum(axis=2)
                gp[:, :, -pw - 1] += gp[:, :, -pw:].sum(axis=2)
            _accumulate(x, gp[:, ph:ph + H, pw:pw + W].reshape(x.data.shape))

    return _make(data, (x, weight, bias), backward)


# -- gradient checking -------------------------------------------------------


def grad_check(fn, inputs: Sequence, eps: float | None = None) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Returns max over all input coordinates of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    With an explicit ``eps`` a single finite-difference step is used.  By
    default a small ladder of steps is tried per coordinate and the best
    agreement kept: in 32-bit storage the difference of two rounded function
    values is itself noisy, and no single step suits both steep and shallow
    coordinates.
    """
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    if eps is not None:
        steps = (float(eps),)
    elif all(t.data.dtype == np.float32 for t in tensors):
        steps = (6e-3, 2e-2, 2e-3)
    else:
        steps = (1e-6, 1e-5)

    out = fn(*tensors)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()

    def evaluate() -> float:
        with no_grad():
            return float(fn(*tensors).data.reshape(()))

    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            a = float(aflat[i])
            best = None
            for step in steps:
                flat[i] = orig + step
                f_plus = evaluate()
                flat[i] = orig - step
                f_minus = evaluate()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                best = err if best is None else min(best, err)
                if best < 1e-6:
                    break
            worst = max(worst, best)
    return worst


# -- parameter registry -------------------------------------------------------


class ParamRegistry:
    """Named trainable tensors.  Names are dotted paths and must be unique."""

    def __init__(self, seed: int = 0) -> None:
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, shape, init: str = "xavier", scale: float = 1.0) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        shape = tuple(shape)
        if init == "xavier":
            fan_in, fan_out = _fans(shape)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-limit, limit, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            data = self.rng.normal(0.0, scale, size=shape)
        else:
            raise ContractError(f"unknown init scheme: {init}")
        t = Tensor(data.astype(np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def named(self) -> dict[str, Tensor]:
        return dict(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def freeze(self, prefix: str = "") -> None:
        for name, t in self._params.items():
            if name.startswith(prefix):
                t.requires_grad = False
                t.grad = None

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    # conv kernels [kh, kw, cin, cout]
    receptive = int(np.prod(shape[:-2]))
    return receptive * shape[-2], receptive * shape[-1]
