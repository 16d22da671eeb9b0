"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a closure mapping the output gradient to gradients of
its inputs. ``Tensor.backward`` walks the recorded graph in reverse
topological order. Only tensors with ``requires_grad`` participate; ops on
constants are evaluated eagerly without recording anything.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

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


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False
        self.name = name

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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Store d(self)/d(leaf) in ``.grad`` of every reachable leaf tensor.

        The graph may be consumed once. Calling backward when any reachable
        tensor still holds a gradient from an earlier pass is rejected; reset
        with ``zero_grad`` first.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward already called on this graph")
        order = _topo_order(self)
        for t in order:
            if t.requires_grad and not t._parents and t.grad is not None:
                raise RuntimeError(
                    f"tensor {t.name or t!r} already holds a gradient; call zero_grad before backward"
                )
        self._consumed = True
        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad and not t._parents:
                t.grad = g
            if t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            t._backward = None

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


def _topo_order(root: Tensor) -> list:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tabs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axes, keepdims), 1.0 / count)


# ------------------------------------------------------------------- structure


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics (1-D operands and batched left side)."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
            return ga, gb
        if bd.ndim == 1:
            ga = unbroadcast(g[..., None] * bd, ad.shape)
            gb = np.tensordot(g, ad, axes=(list(range(g.ndim)), list(range(ad.ndim - 1))))
            return ga, gb
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input width {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ------------------------------------------------------------------ convolution


def _im2col(xd, kh, kw, stride, pad, Ho, Wo, pad_w=None):
    """Rows of flattened ``(kh, kw, C)`` patches for every output position."""
    pw = pad if pad_w is None else pad_w
    if pad or pw:
        B, H, W, C = xd.shape
        xp = np.zeros((B, H + 2 * pad, W + 2 * pw, C))
        xp[:, pad : pad + H, pw : pw + W] = xd
    else:
        xp = xd
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(xd.shape[0] * Ho * Wo, kh * kw * xd.shape[3])


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over NHWC input with HWIO kernels.

    ``x`` may be ``(H, W, C)`` or batched ``(B, H, W, C)``; kernels are
    ``(kh, kw, C_in, C_out)``.
    """
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d: expected NHWC input and HWIO kernels, got {x.shape} and {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    B, H, W, C = xd.shape
    if C != cin:
        raise ValueError(f"conv2d: input shape {x.shape} has {C} channels but kernels {kernels.shape} expect {cin}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ValueError(f"conv2d: kernel {kernels.shape} larger than padded input {(Hp, Wp)}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    cols = _im2col(xd, kh, kw, stride, pad, Ho, Wo)
    wmat = kernels.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(B, Ho, Wo, cout)
    if squeeze:
        out = out[0]

    def backward(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gw = (cols.T @ g2).reshape(kernels.shape)
        if not x.requires_grad:
            return None, gw
        if stride == 1 and pad < min(kh, kw):
            # unit stride: the input gradient is a correlation of g with the flipped kernel
            gcols = _im2col(g.reshape(B, Ho, Wo, cout), kh, kw, 1, kh - 1 - pad, H, W, kw - 1 - pad)
            flipped = kernels.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gx = (gcols @ flipped).reshape(B, H, W, cin)
        else:
            gxp = np.zeros((B, Hp, Wp, cin))
            for i in range(kh):
                for j in range(kw):
                    tap = (g2 @ kernels.data[i, j].T).reshape(B, Ho, Wo, cin)
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += tap
            gx = gxp[:, pad : pad + H, pad : pad + W] if pad else gxp
        return (gx[0] if squeeze else gx), gw

    return _make(out, (x, kernels), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the two spatial axes of ``(..., H, W, C)``."""
    if x.ndim < 3 or x.shape[-3] < 1 or x.shape[-2] < 1:
        raise ValueError(f"global_avg_pool: expected (..., H, W, C), got {x.shape}")
    return mean(x, axis=(-3, -2))


# ---------------------------------------------------------------- normalization


def _update_running(running_mean, running_var, mu, var, momentum):
    if running_mean is not None:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var


def _batch_norm_flat(x, gamma, beta, running_mean, running_var, momentum, eps):
    # statistics over every non-channel axis: work on an (M, C) view, sums via BLAS
    C = x.shape[-1]
    x2 = x.data.reshape(-1, C)
    m = x2.shape[0]
    ones = np.full(m, 1.0 / m)
    mu = ones @ x2
    xc = x2 - mu
    var = ones @ (xc * xc)
    _update_running(running_mean, running_var, mu, var, momentum)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, C)
        gbeta = m * (ones @ g2)
        ggamma = m * (ones @ (g2 * xhat))
        gx = (gamma.data * inv / m) * (m * g2 - gbeta - xhat * ggamma)
        return gx.reshape(x.shape), ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    axes: Sequence[int],
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize the last (channel) axis using statistics over ``axes``.

    In training mode the statistics come from ``x`` and the running buffers
    (if given) are updated in place with the mean over any remaining
    non-channel axes. In eval mode the running buffers are used.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: scale/shift {gamma.shape}/{beta.shape} vs {C} channels")
    axes = _norm_axes(axes, x.ndim)
    if x.ndim - 1 in axes:
        raise ValueError("batch_norm: channel axis cannot be reduced")
    all_but_c = tuple(range(x.ndim - 1))
    m = int(np.prod([x.shape[a] for a in axes]))
    if training and tuple(sorted(axes)) == all_but_c:
        return _batch_norm_flat(x, gamma, beta, running_mean, running_var, momentum, eps)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        if running_mean is not None:
            _update_running(running_mean, running_var, mu.reshape(-1, C).mean(axis=0),
                            var.reshape(-1, C).mean(axis=0), momentum)
    else:
        if running_mean is None:
            raise ValueError("batch_norm: eval mode needs running statistics")
        xc = xd - running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=all_but_c)
        gbeta = g.sum(axis=all_but_c)
        gx_hat = g * gamma.data
        if training:
            s1 = gx_hat.sum(axis=axes, keepdims=True)
            s2 = (gx_hat * xhat).sum(axis=axes, keepdims=True)
            gx = inv / m * (m * gx_hat - s1 - xhat * s2)
        else:
            gx = gx_hat * inv
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


# ------------------------------------------------------------------------- loss


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean negative log-likelihood of ``label`` under softmax(``logits``).

    ``logits`` is ``(N,)`` with an int label, or ``(B, N)`` with ``B`` labels.
    """
    z = logits.data
    n = z.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"softmax_cross_entropy: label {label!r} out of range for {n} classes")
    z2 = z.reshape(-1, n)
    if len(labels) != z2.shape[0]:
        raise ValueError(f"softmax_cross_entropy: {len(labels)} labels for logits {z.shape}")
    logp = log_softmax_np(z2)
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((g / len(labels)) * p).reshape(z.shape),

    return _make(np.asarray(loss), (logits,), backward)
