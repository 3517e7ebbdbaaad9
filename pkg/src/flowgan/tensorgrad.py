"""Minimal reverse-mode autodiff kernels for the flow GAN.

Dense float64 tensors with exactly the operations the conditional GAN
needs: linear maps, 2-D convolution and its transpose, embedding lookup,
batch normalization, the usual activations, binary cross-entropy, and
Adam. Convolutions run as im2col matrix products so BLAS does the heavy
lifting; reductions keep a fixed order so training is reproducible
run-to-run on the same platform.

Every op output is checked for NaN/Inf and raises NonFiniteValue as a
diagnostic guard. Gradients accumulate into Parameter.grad across
backward calls until zero_grad.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteValue, ShapeMismatch

BCE_EPS = 1e-7


class Tensor:
    """Graph node: a float64 array plus the closure that backpropagates it."""

    __slots__ = ("data", "parents", "vjp", "requires_grad", "grad")

    def __init__(self, data, parents=(), vjp=None, requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"non-finite values in tensor of shape {self.data.shape}")
        self.parents = parents
        self.vjp = vjp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf with persistent gradient and Adam state."""

    __slots__ = ("adam_m", "adam_v", "adam_t", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.adam_t = 0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise / structural ops ------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                             _unbroadcast(g, b.shape) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                             _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """scale * x + shift with python-scalar coefficients."""
    return Tensor(scale * x.data + shift, (x,),
                  lambda g: (scale * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    return Tensor(a.data @ b.data, (a, b),
                  lambda g: (g @ b.data.T if a.requires_grad else None,
                             a.data.T @ g if b.requires_grad else None))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return Tensor(x.data.reshape(shape), (x,),
                  lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  tuple(tensors), vjp)


def tsum(x: Tensor) -> Tensor:
    shape = x.data.shape
    return Tensor(x.data.sum(), (x,), lambda g: (np.full(shape, g),))


def tmean(x: Tensor) -> Tensor:
    shape = x.data.shape
    size = x.data.size
    return Tensor(x.data.mean(), (x,), lambda g: (np.full(shape, g / size),))


# --- activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, slope * x.data), (x,),
                  lambda g: (g * np.where(mask, 1.0, slope),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),))


# --- losses ------------------------------------------------------------------

def bce_loss(p: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamp to [eps, 1-eps]."""
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.data.shape)
    clamped = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(t * np.log(clamped) + (1.0 - t) * np.log1p(-clamped)).mean()
    inside = (p.data >= BCE_EPS) & (p.data <= 1.0 - BCE_EPS)

    def vjp(g):
        dp = (clamped - t) / (clamped * (1.0 - clamped)) / p.data.size
        return (g * dp * inside,)

    return Tensor(loss, (p,), vjp)


# --- dense layers -------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch(f"embedding indices must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeMismatch("embedding index out of range")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor(table.data[idx], (table,), vjp)


# --- convolution --------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeMismatch(
            f"conv geometry invalid: size={size} k={k} stride={stride} padding={padding}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, c * k * k), ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n = x.shape[0]
    f, c, k, _ = w.shape
    if x.shape[1] != c:
        raise ShapeMismatch(f"conv input has {x.shape[1]} channels, weights expect {c}")
    cols, ho, wo = _im2col(x, k, stride, padding)
    out = cols @ w.reshape(f, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, stride: int, padding: int,
                      k: int) -> np.ndarray:
    n, f, ho, wo = g.shape
    c = x.shape[1]
    cols, _, _ = _im2col(x, k, stride, padding)
    gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    return (gmat.T @ cols).reshape(f, c, k, k)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of _conv_forward; also the transposed-convolution forward."""
    n, f, ho, wo = g.shape
    _, c, k, _ = w.shape
    h, wdt = out_hw
    # one gemm for all kernel taps, then strided scatter-adds per tap
    cols = np.tensordot(g, w, axes=([1], [0]))  # (n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * padding, wdt + 2 * padding))
    for ti in range(k):
        for tj in range(k):
            out[:, :, ti:ti + stride * ho:stride, tj:tj + stride * wo:stride] += \
                cols[:, :, :, :, ti, tj].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + wdt]
    return np.ascontiguousarray(out)


def _batched(x: Tensor):
    """Accept (C,H,W) as sugar for a single-sample batch."""
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.data.shape), True
    if x.data.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected 3-D or 4-D input, got {x.data.shape}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (C_out, C_in, k, k) weights."""
    xb, squeeze = _batched(x)
    k = w.data.shape[2]
    if w.data.shape[2] != w.data.shape[3]:
        raise ShapeMismatch("only square kernels are supported")
    in_hw = xb.data.shape[2:]
    out_data = _conv_forward(xb.data, w.data, stride, padding)

    def vjp(g):
        gx = (_conv_input_grad(g, w.data, stride, padding, in_hw)
              if xb.requires_grad else None)
        gw = (_conv_weight_grad(xb.data, g, stride, padding, k)
              if w.requires_grad else None)
        return gx, gw

    out = Tensor(out_data, (xb, w), vjp)
    return reshape(out, out.data.shape[1:]) if squeeze else out


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d; weights are (C_in, C_out, k, k).

    conv_transpose2d(y, w) equals the gradient of conv2d(x, w) with
    respect to x, so <conv2d(x, w), y> == <x, conv_transpose2d(y, w)>
    for matching geometry.
    """
    xb, squeeze = _batched(x)
    f, c, k, k2 = w.data.shape
    if k != k2:
        raise ShapeMismatch("only square kernels are supported")
    if xb.data.shape[1] != f:
        raise ShapeMismatch(f"input has {xb.data.shape[1]} channels, weights expect {f}")
    ho, wo = xb.data.shape[2:]
    out_hw = ((ho - 1) * stride + k - 2 * padding, (wo - 1) * stride + k - 2 * padding)
    if out_hw[0] <= 0 or out_hw[1] <= 0:
        raise ShapeMismatch(f"transposed conv output {out_hw} is empty")
    out_data = _conv_input_grad(xb.data, w.data, stride, padding, out_hw)

    def vjp(g):
        gx = _conv_forward(g, w.data, stride, padding) if xb.requires_grad else None
        gw = (_conv_weight_grad(g, xb.data, stride, padding, k)
              if w.requires_grad else None)
        return gx, gw

    out = Tensor(out_data, (xb, w), vjp)
    return reshape(out, out.data.shape[1:]) if squeeze else out


# --- batch normalization -------------------------------------------------------

class BatchNormState:
    """Running statistics updated in training mode, used in eval mode."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.mean.shape[0])
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"batchnorm2d expects NCHW, got {x.data.shape}")
    ch = x.data.shape[1]
    if gamma.data.shape != (ch,) or beta.data.shape != (ch,):
        raise ShapeMismatch("batchnorm parameter shape mismatch")
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    if training:
        mu = x.data.mean(axis=axes)
        centered = x.data - mu[None, :, None, None]
        var = (centered * centered).mean(axis=axes)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = centered * ivar[None, :, None, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.mean = (1.0 - momentum) * state.mean + momentum * mu
        state.var = (1.0 - momentum) * state.var + momentum * unbiased

        def vjp(g):
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            if x.requires_grad:
                gxhat = g * gamma.data[None, :, None, None]
                s1 = gxhat.sum(axis=axes)
                s2 = (gxhat * xhat).sum(axis=axes)
                gx = (gxhat - (s1[None, :, None, None] + xhat * s2[None, :, None, None]) / m) \
                    * ivar[None, :, None, None]
            else:
                gx = None
            return gx, ggamma, gbeta
    else:
        ivar = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean[None, :, None, None]) * ivar[None, :, None, None]

        def vjp(g):
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            gx = (g * (gamma.data * ivar)[None, :, None, None]
                  if x.requires_grad else None)
            return gx, ggamma, gbeta

    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    return Tensor(out, (x, gamma, beta), vjp)


# --- backward pass and optimizer -------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates Parameter grads."""
    if loss.data.ndim != 0:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            if isinstance(node, Parameter):
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update on every parameter."""
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.adam_t += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        mhat = p.adam_m / (1.0 - beta1 ** p.adam_t)
        vhat = p.adam_v / (1.0 - beta2 ** p.adam_t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
