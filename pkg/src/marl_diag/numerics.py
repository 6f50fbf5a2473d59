"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order. Leaves that require grad accumulate into
``.grad`` additively until ``zero_grad`` is called.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic -----------------------------------------------------------

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other
        return Tensor._make(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other
        return Tensor._make(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        out = x ** p
        return Tensor._make(out, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        x = self.data
        out = x[idx]

        def back(g):
            gx = np.zeros_like(x)
            np.add.at(gx, idx, g)
            return (gx,)

        return Tensor._make(out, (self,), back)

    # -- reductions and reshapes ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    # -- elementwise ----------------------------------------------------------

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def sigmoid(self):
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def clip(self, lo: float, hi: float):
        x = self.data
        mask = (x >= lo) & (x <= hi)
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g: (g * mask,))

    def abs(self):
        s = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * s,))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# -- free-function primitives -------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return Tensor._make(A @ B, (a, b), back)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def log(x: Tensor) -> Tensor:
    return x.log()


def mean(x: Tensor, axis=None) -> Tensor:
    return x.mean(axis=axis)


def power(x: Tensor, p: float) -> Tensor:
    return x ** p


def add(a, b) -> Tensor:
    return as_tensor(a) + b


def mul(a, b) -> Tensor:
    return as_tensor(a) * b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``w`` is ``[in, out]``."""
    out = matmul(x, w)
    return out if b is None else out + b


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    gain, bias = as_tensor(gain), as_tensor(bias)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    n = X.shape[-1]

    def back(g):
        gg = _unbroadcast(g * xhat, G.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * G
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return Tensor._make(xhat * G + bias.data, (x, gain, bias), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def global_avg_pool(x: Tensor) -> Tensor:
    """``[B, C, H, W] -> [B, C]``."""
    return x.mean(axis=(2, 3))


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` max pooling; H and W must divide by ``k``.

    The gradient goes to the first maximal element of each window in row-major order.
    """
    B, C, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"max_pool2d: spatial shape {(H, W)} not divisible by {k}")
    X = x.data
    offsets = [(i, j) for i in range(k) for j in range(k)]
    out = X[:, :, ::k, ::k].copy()
    for i, j in offsets[1:]:
        np.maximum(out, X[:, :, i::k, j::k], out=out)

    def back(g):
        gx = np.zeros_like(X)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in offsets:
            hit = (X[:, :, i::k, j::k] == out) & ~taken
            gx[:, :, i::k, j::k] = np.where(hit, g, 0)
            taken |= hit
        return (gx,)

    return Tensor._make(out, (x,), back)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.

    ``x`` is ``[B, C_in, H, W]``, ``w`` is ``[C_out, C_in, k, k]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise DimensionError(f"conv2d kernel {(kh, kw)} larger than padded input {(H + 2 * pad, W + 2 * pad)}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # B x (Cin*kh*kw) x (Ho*Wo): rows stay contiguous along the output width
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, Cin * kh * kw, Ho * Wo)
    wmat = w.data.reshape(Cout, -1)
    out = np.matmul(wmat, cols).reshape(B, Cout, Ho, Wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape(1, Cout, 1, 1)
        parents.append(b)

    def back(g):
        g3 = g.reshape(B, Cout, Ho * Wo)
        gw = np.einsum("bop,bkp->ok", g3, cols, optimize=True).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(B, Cin, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._make(out, parents, back)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_index: tuple | None = None
    nan_index: tuple | None = None
    analytic: np.ndarray | None = field(default=None, repr=False)
    numeric: np.ndarray | None = field(default=None, repr=False)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradient of scalar ``f`` at ``x`` with central differences.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps coordinates whose true gradient is zero from dividing roundoff by
    roundoff.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    f(xt).backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x0.copy())).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x0.copy())).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)

    bad = ~(np.isfinite(analytic) & np.isfinite(numeric))
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        return GradCheckReport(float("nan"), False, nan_index=idx, analytic=analytic, numeric=numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(err.argmax()), err.shape) if err.size else None
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckReport(max_err, max_err <= tol, worst_index=worst, analytic=analytic, numeric=numeric)
