"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like) inputs and returns a new
Tensor; when a tape is active and an input requires a gradient the
application is recorded together with its vector-Jacobian product.
"""
from __future__ import annotations

import builtins

import numpy as np
from scipy.special import erf

from ..errors import NumericError, ShapeError
from .tensor import Tensor, as_tensor, get_dtype, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return record("sub", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return record("mul", (a, b), out,
                  lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                             _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def grad(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", (a, b), out, grad)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), Tensor(-a.data), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return record("exp", (a,), Tensor(y), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record("log", (a,), Tensor(np.log(a.data)), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return record("sqrt", (a,), Tensor(y), lambda g: (g * 0.5 / y,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return record("abs", (a,), Tensor(np.abs(a.data)), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient passes only strictly inside."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return record("clip", (a,), Tensor(np.clip(a.data, lo, hi)), lambda g: (g * inside,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return record("relu", (a,), Tensor(a.data * pos), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record("sigmoid", (a,), Tensor(y), lambda g: (g * y * (1.0 - y),))


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = Tensor(x * cdf)

    def grad(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return record("gelu", (a,), out, grad)


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return as_tensor(a)
    if rng is None:
        raise ValueError("dropout with rate > 0 needs a seeded generator")
    keep = (rng.random(as_tensor(a).shape) >= rate) / (1.0 - rate)
    return mul(a, keep.astype(get_dtype()))


# -- reductions / shape ------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return record("sum", (a,), out, grad)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = Tensor(np.mean(a.data, axis=axis, keepdims=keepdims))

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)

    return record("mean", (a,), out, grad)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record("reshape", (a,), Tensor(a.data.reshape(shape)),
                  lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), Tensor(np.transpose(a.data, axes)),
                  lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def roll(a, shift, axis) -> Tensor:
    a = as_tensor(a)
    neg_shift = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return record("roll", (a,), Tensor(np.roll(a.data, shift, axis)),
                  lambda g: (np.roll(g, neg_shift, axis),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    return record("concat", tensors, out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def grad(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record("stack", tensors, out, grad)


def take(a, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather ``a`` along ``axis`` with an integer index array."""
    a = as_tensor(a)
    index = np.asarray(index)
    out = Tensor(np.take(a.data, index, axis=axis))
    ax = axis % a.ndim

    def grad(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(ga, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (ga,)

    return record("take", (a,), out, grad)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def grad(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        ga[key] = g
        return (ga,)

    return record("slice", (a,), Tensor(a.data[key]), grad)


def pad(a, widths) -> Tensor:
    """Zero-pad; ``widths`` is a per-axis list of ``(before, after)``."""
    a = as_tensor(a)
    key = tuple(builtins.slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return record("pad", (a,), Tensor(np.pad(a.data, widths)), lambda g: (g[key],))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def grad(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), out, grad)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data
    out = Tensor(y.reshape(lead + (weight.shape[1],)))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record("linear", inputs, out, grad)


# -- normalisation -------------------------------------------------------------

def softmax_rows(x) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), Tensor(y), grad)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis) to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise ShapeError(f"layer_norm shapes: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    red = tuple(range(x.ndim - 1))

    def grad(g):
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer_norm", (x, gamma, beta), out, grad)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel (last axis) batch normalisation.

    In training mode statistics come from every leading position and the
    running buffers are updated in place as ``m*running + (1-m)*batch``.
    """
    from ..errors import ConfigError

    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    red = tuple(range(x.ndim - 1))
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = gamma.data * inv
        out = Tensor((x.data - running_mean) * scale + beta.data)
        xhat = (x.data - running_mean) * inv

        def grad_eval(g):
            return g * scale, (g * xhat).sum(axis=red), g.sum(axis=red)

        return record("batch_norm", (x, gamma, beta), out, grad_eval)

    n = x.size // x.shape[-1]
    if n < 2:
        raise ConfigError("batch_norm in train mode needs at least 2 values per channel")
    mu = x.data.mean(axis=red)
    xc = x.data - mu
    var = (xc * xc).mean(axis=red)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu
    running_var *= momentum
    running_var += (1.0 - momentum) * var
    out = Tensor(xhat * gamma.data + beta.data)

    def grad(g):
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=red) - xhat * (dxhat * xhat).mean(axis=red))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("batch_norm", (x, gamma, beta), out, grad)


# -- spatial -------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on channels-last input.

    ``x``: (B, H, W, Cin); ``weight``: (kh, kw, Cin, Cout).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    kh, kw, cin, cout = weight.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ShapeError(f"conv2d expects (B,H,W,{cin}) input, got {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    hp, wp = xp.shape[1:3]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    def window(i, j):
        return (builtins.slice(None), builtins.slice(i, i + stride * (ho - 1) + 1, stride),
                builtins.slice(j, j + stride * (wo - 1) + 1, stride))

    y = np.zeros((x.shape[0], ho, wo, cout), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            y += xp[window(i, j)] @ weight.data[i, j]
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad(g):
        gw = np.zeros_like(weight.data)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                patch = xp[window(i, j)]
                gw[i, j] = patch.reshape(-1, cin).T @ g2
                if gxp is not None:
                    gxp[window(i, j)] += g @ weight.data[i, j].T
        gx = None
        if gxp is not None:
            gx = gxp[:, padding:padding + x.shape[1], padding:padding + x.shape[2]] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record("conv2d", inputs, Tensor(y), grad)


def maxpool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k max pooling on (B, H, W, C); first max wins ties."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(b, h // k, k, w // k, k, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(b, h // k, w // k, c, k * k)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def grad(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, h // k, w // k, c, k, k).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(x.shape),)

    return record("maxpool2d", (x,), Tensor(y), grad)
