"""1D neighborhood attention.

Query i attends to the contiguous window of min(k, n) keys starting at
clip(i - k // 2, 0, n - min(k, n)), so windows shift inward at the sequence
boundaries and every query sees the same number of keys. A per-head table of
2k - 1 relative biases is indexed by (key - query) + k - 1 and added to the
raw logit before the 1/sqrt(d) scaling.

Arrays are laid out (..., heads, n, d); any leading axes are batch axes and
share the bias table.
"""

from dataclasses import dataclass
from typing import Optional, Tuple
import logging
import math

import numpy as np

from autograd import Tensor, functional as F
from autograd.tensor import make_result
from utils.error_handling import ContractError, DimensionError, NeighborhoodIndexError

logger = logging.getLogger(__name__)


def _check_window(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise ContractError(f"Neighborhood size must be an odd positive integer, got {k}")


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Window size, head layout and boundary rule of one attention layer."""
    k: int
    n_heads: int = 1
    head_dim: int = 1
    boundary: str = "clamp"

    def __post_init__(self):
        _check_window(self.k)
        if self.n_heads < 1 or self.head_dim < 1:
            raise ContractError("n_heads and head_dim must be positive",
                                f"got n_heads={self.n_heads}, head_dim={self.head_dim}")
        if self.boundary != "clamp":
            raise ContractError(f"Unsupported boundary rule: {self.boundary!r}")

    @property
    def bias_size(self) -> int:
        return 2 * self.k - 1

    def init_bias(self, dtype=None) -> np.ndarray:
        return np.zeros((self.n_heads, self.bias_size), dtype=dtype or np.float32)


def window_starts(n: int, k: int) -> np.ndarray:
    """First attended index for every query position."""
    kk = min(k, n)
    return np.clip(np.arange(n) - k // 2, 0, n - kk)


def neighbor_indices(i: int, k: int, n: int) -> Tuple[int, ...]:
    """Ordered key positions attended by query i."""
    _check_window(k)
    if not 0 <= i < n:
        raise NeighborhoodIndexError(f"Position {i} outside sequence of length {n}")
    kk = min(k, n)
    start = min(max(i - k // 2, 0), n - kk)
    return tuple(range(start, start + kk))


@dataclass
class NeighborMap:
    """Materialized neighbor lists; only tests and the reference path use it."""
    n: int
    k: int
    indices: np.ndarray

    @classmethod
    def build(cls, n: int, k: int) -> "NeighborMap":
        _check_window(k)
        kk = min(k, n)
        return cls(n=n, k=k, indices=window_starts(n, k)[:, None] + np.arange(kk)[None, :])

    def __getitem__(self, i: int) -> Tuple[int, ...]:
        if not 0 <= i < self.n:
            raise NeighborhoodIndexError(f"Position {i} outside sequence of length {self.n}")
        return tuple(int(m) for m in self.indices[i])

    def __len__(self) -> int:
        return self.n

    def mask(self) -> np.ndarray:
        """Boolean (n, n) membership matrix."""
        out = np.zeros((self.n, self.n), dtype=bool)
        np.put_along_axis(out, self.indices, True, axis=1)
        return out


@dataclass
class NAContext:
    """Forward state kept for the backward pass."""
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    starts: np.ndarray
    window: int
    scale: float
    has_bias: bool


def _validate(q: np.ndarray, k: np.ndarray, v: np.ndarray,
              bias: Optional[np.ndarray], window: int) -> None:
    _check_window(window)
    if q.ndim < 3:
        raise DimensionError("Expected (..., heads, n, d) arrays", {"q.ndim": q.ndim})
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError("Q, K and V must have identical shapes",
                             {"q": q.shape, "k": k.shape, "v": v.shape})
    if bias is not None and bias.shape != (q.shape[-3], 2 * window - 1):
        raise DimensionError("Bias table must be (heads, 2k - 1)",
                             {"bias": bias.shape, "heads": q.shape[-3], "2k-1": 2 * window - 1})


def _gather_rows(x: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return x[..., cols, :]


def _scatter_rows(target: np.ndarray, cols: np.ndarray, values: np.ndarray) -> None:
    np.add.at(np.moveaxis(target, -2, 0), cols, np.moveaxis(values, -2, 0))


def na_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: Optional[np.ndarray],
               window: int, return_context: bool = False):
    """Neighborhood attention forward pass.

    Loops over window offsets j < min(k, n) and gathers one key/value row
    per query for each offset, so no (n, n) array is formed.

    Args:
        q, k, v: Arrays of shape (..., heads, n, d).
        bias: Relative bias table (heads, 2k - 1) or None.
        window: Odd neighborhood size k.
        return_context: Also return the NAContext needed by `na_backward`.

    Returns:
        Output of shape (..., heads, n, d), and the context when requested.
    """
    _validate(q, k, v, bias, window)
    n, d = q.shape[-2], q.shape[-1]
    kk = min(window, n)
    starts = window_starts(n, window)
    rel = starts - np.arange(n) + window - 1
    scale = 1.0 / math.sqrt(d)

    logits = np.empty(q.shape[:-1] + (kk,), dtype=q.dtype)
    for j in range(kk):
        cols = starts + j
        logits[..., j] = np.einsum("...nd,...nd->...n", q, _gather_rows(k, cols))
        if bias is not None:
            logits[..., j] += bias[:, rel + j]
    logits *= scale
    logits -= logits.max(axis=-1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=-1, keepdims=True)

    out = np.zeros_like(q)
    for j in range(kk):
        out += attn[..., j, None] * _gather_rows(v, starts + j)

    if not return_context:
        return out
    ctx = NAContext(q=q, k=k, v=v, attn=attn, starts=starts, window=window,
                    scale=scale, has_bias=bias is not None)
    return out, ctx


def na_backward(grad_out: np.ndarray, ctx: Optional[NAContext]):
    """Adjoints (dQ, dK, dV, dbias) of `na_forward`; dbias is None without a bias."""
    if ctx is None:
        raise ContractError("na_backward called without saved forward state",
                            "run na_forward(..., return_context=True) first")
    q, k, v, attn = ctx.q, ctx.k, ctx.v, ctx.attn
    if grad_out.shape != q.shape:
        raise DimensionError("Output gradient shape differs from forward output",
                             {"grad_out": grad_out.shape, "output": q.shape})
    n = q.shape[-2]
    kk = attn.shape[-1]
    heads = q.shape[-3]
    rel = ctx.starts - np.arange(n) + ctx.window - 1

    dv = np.zeros_like(v)
    dattn = np.empty_like(attn)
    for j in range(kk):
        cols = ctx.starts + j
        dattn[..., j] = np.einsum("...nd,...nd->...n", grad_out, _gather_rows(v, cols))
        _scatter_rows(dv, cols, attn[..., j, None] * grad_out)

    dlogits = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscaled = dlogits * ctx.scale

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dbias = np.zeros((heads, 2 * ctx.window - 1), dtype=q.dtype) if ctx.has_bias else None
    for j in range(kk):
        cols = ctx.starts + j
        w = dscaled[..., j, None]
        dq += w * _gather_rows(k, cols)
        _scatter_rows(dk, cols, w * q)
        if dbias is not None:
            per_head = dscaled[..., j].reshape(-1, heads, n).sum(axis=0)
            np.add.at(dbias.T, rel + j, per_head.T)
    return dq, dk, dv, dbias


def neighborhood_attention(q: Tensor, k: Tensor, v: Tensor, bias: Optional[Tensor],
                           window: int) -> Tensor:
    """Differentiable neighborhood attention over tensors (..., heads, n, d)."""
    out, ctx = na_forward(q.data, k.data, v.data, None if bias is None else bias.data,
                          window, return_context=True)

    def backward(g):
        dq, dk, dv, dbias = na_backward(g, ctx)
        return (dq, dk, dv) if bias is None else (dq, dk, dv, dbias)

    parents = (q, k, v) if bias is None else (q, k, v, bias)
    return make_result(out, parents, backward, "neighborhood_attention")


def relative_index(n: int, window: int) -> Tuple[np.ndarray, np.ndarray]:
    """(n, n) bias-table index and window-membership mask for the dense path."""
    member = NeighborMap.build(n, window).mask()
    offsets = np.arange(n)[None, :] - np.arange(n)[:, None] + window - 1
    return np.clip(offsets, 0, 2 * window - 2), member


def na_reference(q, k, v, bias, window: int) -> Tensor:
    """Dense global attention with out-of-window logits set to -inf.

    Built from autodiff primitives so its gradients serve as a backward oracle.
    Costs O(n^2) time and memory per head.
    """
    q, k, v = (t if isinstance(t, Tensor) else Tensor(t, dtype=np.asarray(t).dtype) for t in (q, k, v))
    if bias is not None and not isinstance(bias, Tensor):
        bias = Tensor(bias, dtype=np.asarray(bias).dtype)
    _validate(q.data, k.data, v.data, None if bias is None else bias.data, window)
    n, d = q.shape[-2], q.shape[-1]
    heads = q.shape[-3]

    index, member = relative_index(n, window)
    logits = F.matmul(q, F.swapaxes(k, -1, -2))
    if bias is not None:
        dense_bias = F.reshape(F.gather(bias, index.reshape(-1), axis=1), (heads, n, n))
        logits = logits + dense_bias
    logits = logits * (1.0 / math.sqrt(d))
    mask = np.where(member, 0.0, -np.inf).astype(q.dtype)
    weights = F.softmax(logits + mask, axis=-1)
    return F.matmul(weights, v)


def attention_weights(q: np.ndarray, k: np.ndarray, bias: Optional[np.ndarray],
                      window: int) -> np.ndarray:
    """Dense (..., heads, n, n) attention matrix of the windowed kernel, for inspection."""
    v = np.zeros_like(q)
    _, ctx = na_forward(q, k, v, bias, window, return_context=True)
    n = q.shape[-2]
    dense = np.zeros(q.shape[:-1] + (n,), dtype=q.dtype)
    for j in range(ctx.attn.shape[-1]):
        np.put_along_axis(dense, np.broadcast_to((ctx.starts + j)[:, None], dense.shape[:-1] + (1,)),
                          ctx.attn[..., j, None], axis=-1)
    return dense


def flops_na_forward(n: int, k: int, d: int, heads: int) -> int:
    """heads * n * min(k, n) * (4d + 5)."""
    return heads * n * min(k, n) * (4 * d + 5)


def flops_na_reference(n: int, d: int, heads: int) -> int:
    """heads * n * n * (4d + 5)."""
    return heads * n * n * (4 * d + 5)


def score_bytes_na_forward(n: int, k: int, heads: int, itemsize: int) -> int:
    """Size of the (heads, n, min(k, n)) score buffer."""
    return heads * n * min(k, n) * itemsize


def score_bytes_na_reference(n: int, heads: int, itemsize: int) -> int:
    """Size of the dense (heads, n, n) score matrix."""
    return heads * n * n * itemsize
