"""Minimal reverse-mode automatic differentiation over numpy arrays.

The engine records a dynamic tape: every operation whose inputs require
gradients produces a node holding its parents and a vector-Jacobian-product
closure. ``backward(root)`` walks the tape once in reverse topological order
and accumulates gradients into the leaves.

Design constraints that shaped this module:

* dtype discipline: all ops preserve the input dtype exactly, so the same
  graph runs in float32 for speed or float64 for finite-difference checks.
  Python-float scalars are lifted to the anchor tensor's dtype.
* determinism: no op uses threads, unordered reductions, or in-place
  mutation of shared buffers; the only scatter (window gather backward)
  uses ``np.add.at``, which applies updates in index order.
* every op here is validated against central finite differences in the
  test-suite before anything downstream relies on it.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import erf as _erf_np

from .errors import NumericError

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class no_grad:
    """Context manager that suspends tape recording (inference mode)."""

    def __enter__(self) -> "no_grad":
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus optional tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents: tuple["Tensor", ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
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


def _lift(x, like: Tensor) -> Tensor:
    """Wrap a scalar/ndarray as a constant Tensor in the anchor's dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _binary_lift(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    raise TypeError("at least one operand must be a Tensor")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise arithmetic -----------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_lift(a, b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _binary_lift(a, b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _binary_lift(a, b)
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _binary_lift(a, b)
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _node(-a.data, (a,), vjp)


# --- shape ops -------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _node(a.data.reshape(shape), (a,), vjp)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def vjp(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), vjp)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(a.data, axes), (a,), vjp)


# --- reductions ------------------------------------------------------

def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(data, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --- elementwise nonlinearities --------------------------------------

def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _node(data, (a,), vjp)


def tlog(a: Tensor) -> Tensor:
    def vjp(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), vjp)


def tsqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / data),)

    return _node(data, (a,), vjp)


def terf(a: Tensor) -> Tensor:
    data = _erf_np(a.data)
    two_over_sqrt_pi = 2.0 / math.sqrt(math.pi)

    def vjp(g):
        return (g * (two_over_sqrt_pi * np.exp(-a.data * a.data)),)

    return _node(data, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    e = _erf_np(a.data * _INV_SQRT2)
    data = 0.5 * a.data * (1.0 + e)

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (0.5 * (1.0 + e) + a.data * pdf),)

    return _node(data, (a,), vjp)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    data = np.maximum(a.data, np.asarray(floor, dtype=a.data.dtype))
    mask = a.data > floor

    def vjp(g):
        return (g * mask,)

    return _node(data, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is gradient-free because
    softmax is invariant to per-row constants, so this is exactly correct."""
    m = a.data.max(axis=axis, keepdims=True)
    z = np.exp(a.data - m)
    data = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), vjp)


# --- matrix ops ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = np.matmul(a.data, b.data)

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = _unbroadcast(np.matmul(g, bt), a.data.shape)
        gb = _unbroadcast(np.matmul(at, g), b.data.shape)
        return ga, gb

    return _node(data, (a, b), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned scale/offset."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggamma = _unbroadcast(g * xhat, gamma.data.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return gx, ggamma, gbeta

    return _node(data, (x, gamma, beta), vjp)


def gather_windows(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Slide a window over axis 1: (B, L, C) -> (B, n_out, kernel*C).

    Window i covers input rows [i*stride, i*stride + kernel). When the kernel
    overlaps past the end (kernel > stride), the input is zero-padded on the
    right so that n_out = floor(L / stride) whenever stride divides L.
    """
    B, L, C = x.data.shape
    n_out = L // stride
    needed = (n_out - 1) * stride + kernel
    pad = max(0, needed - L)
    if stride == kernel and pad == 0 and n_out * stride == L:
        # contiguous tiling: pure reshape
        data = x.data.reshape(B, n_out, kernel * C)

        def vjp(g):
            return (g.reshape(B, L, C),)

        return _node(data, (x,), vjp)

    xp = np.concatenate([x.data, np.zeros((B, pad, C), dtype=x.data.dtype)], axis=1) if pad else x.data
    idx = stride * np.arange(n_out)[:, None] + np.arange(kernel)[None, :]
    data = xp[:, idx, :].reshape(B, n_out, kernel * C)

    def vjp(g):
        g4 = g.reshape(B, n_out, kernel, C)
        gx = np.zeros((B, L + pad, C), dtype=g.dtype)
        np.add.at(gx, (slice(None), idx), g4)
        return (gx[:, :L, :],)

    return _node(data, (x,), vjp)


def logdet_psd(a: Tensor) -> Tensor:
    """log-determinant of a symmetric positive-definite matrix via Cholesky.

    Gradient: d logdet(A) / dA = inv(A) (symmetric). Factorization failure is
    reported with eigenvalue diagnostics rather than propagated silently.
    """
    mat = a.data
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        try:
            eig = np.linalg.eigvalsh(mat)
            detail = f"eigenvalue range [{eig.min():.3e}, {eig.max():.3e}]"
        except np.linalg.LinAlgError:
            detail = "eigenvalues unavailable"
        raise NumericError(f"matrix is not positive definite ({detail})") from None
    data = np.asarray(2.0 * np.log(np.diag(chol)).sum(), dtype=mat.dtype)

    def vjp(g):
        inv = cho_solve((chol, True), np.eye(mat.shape[0], dtype=mat.dtype))
        inv = 0.5 * (inv + inv.T)
        return (g * inv,)

    return _node(data, (a,), vjp)


# --- engine ----------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order  # parents precede children


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``."""
    if not root.requires_grad:
        raise NumericError("backward called on a tensor with no recorded graph")
    if grad is None:
        grad = np.ones_like(root.data)
    root.grad = grad if root.grad is None else root.grad + grad
    for node in reversed(_topological_order(root)):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                parent.grad = g if parent.grad is None else parent.grad + g
        # free intermediate state so long chains do not hoard memory
        node.grad = None
        node._vjp = None
        node._parents = ()


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None
