"""Differentiable primitives.

Each function computes its forward value with numpy and hands `make_result` a
closure that maps the output adjoint to one adjoint per parent. Adjoints for
broadcast operands are summed back to the operand's shape.
"""

from typing import Iterable, Optional, Sequence, Tuple, Union
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from utils.error_handling import ContractError, DimensionError
from .tensor import Tensor, make_result

Padding = Union[int, Tuple[int, int]]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as non-differentiable tensors in the dtype of `like`."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make_result(out, (a,), backward, "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        # the derivative at 0 is taken as 0 so floored norms stay finite
        g = np.broadcast_to(np.asarray(g, dtype=out.dtype), out.shape)
        grad = np.zeros_like(out)
        np.divide(g * 0.5, out, out=grad, where=out > 0)
        return (grad,)

    return make_result(out, (a,), backward, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the adjoint flows only where a > floor."""
    keep = a.data > floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.dtype))
    return make_result(out, (a,), lambda g: (g * keep,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return make_result(a.data * keep, (a,), lambda g: (g * keep,), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(a.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(a.dtype, copy=False),)

    return make_result(out, (a,), backward, "gelu")


# --- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims",
                             {"a.ndim": a.ndim, "b.ndim": b.ndim})
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions differ",
                             {"a.cols": a.shape[-1], "b.rows": b.shape[-2]})

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, m) @ (..., m, p) with identical leading axes."""
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("batched_matmul leading axes differ",
                             {"a.batch": a.shape[:-2], "b.batch": b.shape[:-2]})
    return matmul(a, b)


# --- shape -----------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    return make_result(np.swapaxes(a.data, axis1, axis2), (a,),
                       lambda g: (np.swapaxes(g, axis1, axis2),), "swapaxes")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis),
                       tensors, backward, "concat")


def gather(a: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Select entries of `a` along `axis` by a 1-D integer index (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise DimensionError("gather takes a 1-D index", {"index.ndim": index.ndim})
    axis = axis % a.ndim
    if index.size and (index.min() < 0 or index.max() >= a.shape[axis]):
        raise ContractError("gather index out of range",
                            f"axis {axis} has size {a.shape[axis]}")

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), index, np.moveaxis(g, axis, 0))
        return (ga,)

    return make_result(np.take(a.data, index, axis=axis), (a,), backward, "gather")


def index(a: Tensor, key) -> Tensor:
    """Basic and integer-array indexing, `a[key]`."""
    if isinstance(key, Tensor):
        key = key.data.astype(np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return make_result(a.data[key], (a,), backward, "index")


# --- reductions ------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, Iterable):
        return tuple(ax % ndim for ax in axis)
    return (axis % ndim,)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return make_result(out, (a,), backward, "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """x - logsumexp(x), stable for large logits."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError("layer_norm affine parameters must match the last axis",
                             {"x.last": x.shape[-1], "gamma": gamma.shape, "beta": beta.shape})
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# --- convolution -----------------------------------------------------------

def _pad_pair(padding: Padding) -> Tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        left, right = int(padding[0]), int(padding[1])
    else:
        left = right = int(padding)
    if left < 0 or right < 0:
        raise ContractError("padding must be non-negative", f"got {padding}")
    return left, right


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: Padding = 0) -> Tensor:
    """Cross-correlation of (B, C_in, L) with weight (C_out, C_in, K).

    `padding` is either symmetric or a (left, right) pair of zero columns.
    Output length is floor((L + left + right - K) / stride) + 1.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError("conv1d expects (B, C, L) input and (C_out, C_in, K) weight",
                             {"x.ndim": x.ndim, "weight.ndim": weight.ndim})
    if stride < 1:
        raise ContractError("conv1d stride must be >= 1", f"got {stride}")
    batch, c_in, length = x.shape
    c_out, c_in_w, k = weight.shape
    if c_in != c_in_w:
        raise DimensionError("conv1d channel mismatch",
                             {"input.channels": c_in, "weight.in_channels": c_in_w})
    left, right = _pad_pair(padding)
    padded = length + left + right
    if padded < k:
        raise DimensionError("conv1d kernel longer than padded input",
                             {"padded_length": padded, "kernel": k})
    l_out = (padded - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :l_out]
    out = np.einsum("bclk,ock->bol", cols, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        gw = np.einsum("bol,bclk->ock", g, cols, optimize=True)
        gcols = np.einsum("bol,ock->bclk", g, weight.data, optimize=True)
        gxp = np.zeros_like(xp)
        span = stride * (l_out - 1) + 1
        for j in range(k):
            gxp[:, :, j:j + span:stride] += gcols[..., j]
        grads = [gxp[:, :, left:left + length], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out.astype(x.dtype, copy=False), parents, backward, "conv1d")


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: Padding = 0) -> Tensor:
    """Adjoint of `conv1d`; weight is (C_in, C_out, K).

    Output length is (L - 1) * stride - left - right + K.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError("conv_transpose1d expects (B, C, L) input and (C_in, C_out, K) weight",
                             {"x.ndim": x.ndim, "weight.ndim": weight.ndim})
    if stride < 1:
        raise ContractError("conv_transpose1d stride must be >= 1", f"got {stride}")
    batch, c_in, length = x.shape
    c_in_w, c_out, k = weight.shape
    if c_in != c_in_w:
        raise DimensionError("conv_transpose1d channel mismatch",
                             {"input.channels": c_in, "weight.in_channels": c_in_w})
    left, right = _pad_pair(padding)
    full = (length - 1) * stride + k
    l_out = full - left - right
    if l_out < 1:
        raise DimensionError("conv_transpose1d output would be empty",
                             {"length": length, "kernel": k, "padding": (left, right)})

    span = stride * (length - 1) + 1
    y = np.zeros((batch, c_out, full), dtype=x.dtype)
    for j in range(k):
        y[:, :, j:j + span:stride] += np.einsum("bil,io->bol", x.data, weight.data[:, :, j],
                                                optimize=True)
    out = y[:, :, left:left + l_out]
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        gfull = np.zeros((batch, c_out, full), dtype=g.dtype)
        gfull[:, :, left:left + l_out] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for j in range(k):
            gs = gfull[:, :, j:j + span:stride]
            gx += np.einsum("bol,io->bil", gs, weight.data[:, :, j], optimize=True)
            gw[:, :, j] = np.einsum("bil,bol->io", x.data, gs, optimize=True)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(out), parents, backward, "conv_transpose1d")


# --- losses ----------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy expects (B, n_classes) logits and (B,) labels",
                             {"logits": logits.shape, "labels": labels.shape})
    logp = log_softmax(logits, axis=-1)
    picked = index(logp, (np.arange(labels.size), labels))
    return neg(mean(picked))
