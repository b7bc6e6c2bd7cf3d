"""Dense float64 tensors with reverse-mode differentiation.

Every tensor produced by an operation on gradient-tracking inputs keeps a
reference to its parents and a closure mapping the output gradient to the
input gradients. :meth:`Tensor.backward` replays those closures in reverse
topological order, accumulating into ``.grad`` of the leaves.

Stochastic operations (dropout) never touch global random state; they take
an explicit :class:`numpy.random.Generator` so a fixed seed reproduces a run
bit for bit.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericInputError, ShapeError, UsageError

log = logging.getLogger(__name__)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""

    # construction helpers

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # reverse mode

    def _topo_order(self) -> list:
        order, seen = [], set()
        stack = [(self, False)]
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

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self._topo_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operators

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
        "mul",
    )


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return Tensor._make(x**p, (a,), lambda g: (g * p * x ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor._make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    """Square root with a zero subgradient at 0 (used on clamped distances)."""
    y = np.sqrt(a.data)

    def backward(g):
        out = np.zeros_like(y)
        np.divide(g, 2.0 * y, out=out, where=y > 0)
        return (out,)

    return Tensor._make(y, (a,), backward, "sqrt")


def clamp_min(a: Tensor, lo: float = 0.0) -> Tensor:
    mask = a.data > lo
    return Tensor._make(np.maximum(a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    return clamp_min(a, 0.0)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return Tensor._make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def activation(a: Tensor, kind: str = "relu", slope: float = 0.01) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    raise ConfigError(f"unknown activation {kind!r}")


def dropout(a: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise UsageError("dropout in training mode needs an explicit rng")
    scale = (rng.random(a.shape) >= p) / (1.0 - p)
    return Tensor._make(a.data * scale, (a,), lambda g: (g * scale,), "dropout")


# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; the backward scatters with accumulation."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(a.data[idx], (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def flip(a: Tensor, axis: int = -1) -> Tensor:
    return Tensor._make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes.

    Backward: dA = dC @ B^T, dB = A^T @ dC (summed over broadcast batch axes).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting each row's max."""
    x = m.data
    if not np.all(np.isfinite(x)):
        raise NumericInputError("softmax_rows received non-finite entries")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return Tensor._make(s, (m,), backward, "softmax")


def log_softmax(m: Tensor) -> Tensor:
    x = m.data
    if not np.all(np.isfinite(x)):
        raise NumericInputError("log_softmax received non-finite entries")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    s = np.exp(y)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(y, (m,), backward, "log_softmax")


# normalisation and convolution


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over axis 1 of an ``N x C [x ...]`` tensor.

    In training mode the batch moments are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, as is customary).
    """
    if x.ndim < 2 or x.shape[1] != gain.shape[0] or gain.shape != bias.shape:
        raise ShapeError(f"batch_norm channel mismatch: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if running_mean.shape != gain.shape or running_var.shape != gain.shape:
        raise ShapeError("batch_norm running statistics do not match channel count")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    n = xd.size // xd.shape[1]
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gain.data.reshape(bshape)
    out = xhat * gd + bias.data.reshape(bshape)

    def backward(g):
        dgain = np.sum(g * xhat, axis=axes)
        dbias = np.sum(g, axis=axes)
        dxhat = g * gd
        if training:
            dx = (
                inv_std.reshape(bshape)
                / n
                * (
                    n * dxhat
                    - np.sum(dxhat, axis=axes).reshape(bshape)
                    - xhat * np.sum(dxhat * xhat, axis=axes).reshape(bshape)
                )
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgain, dbias

    return Tensor._make(out, (x, gain, bias), backward, "batch_norm")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``N x C_in x H x W`` with ``C_out x C_in x kh x kw``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(co, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        dw = (gf.T @ cols).reshape(w.shape)
        dcols = (gf @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(np.ascontiguousarray(out), parents, backward, "conv2d")


def pointwise_conv(e: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: a per-pixel linear map ``C_in -> C_out``.

    Accepts ``C x H x W`` or batched ``N x C x H x W`` input; ``w`` is ``C_out x C_in``.
    """
    if e.ndim not in (3, 4) or w.ndim != 2 or e.shape[-3] != w.shape[1]:
        raise ShapeError(f"pointwise_conv shape mismatch: input {e.shape}, weight {w.shape}")
    h, wd = e.shape[-2:]
    flat = e.reshape(e.shape[:-2] + (h * wd,))
    out = matmul(w, flat)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"pointwise_conv bias shape {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.reshape(-1, 1)
    return out.reshape(out.shape[:-1] + (h, wd))


# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare reverse-mode gradients with central finite differences.

    Returns ``max |g_ad - g_fd| / (|g_fd| + 1e-8)`` over the checked entries.
    ``max_entries`` caps the number of probed coordinates per parameter
    (chosen with ``rng``); by default every entry is probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for p in params:
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        g_ad_flat = g_ad.reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
            flat[i] = orig
            g_fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(g_ad_flat[i] - g_fd) / (abs(g_fd) + 1e-8))
    return worst
