"""Central-difference gradient checking."""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence
import logging

import numpy as np

from utils.error_handling import ContractError
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class GradcheckResult:
    passed: bool
    errors: List[float] = field(default_factory=list)
    checked_entries: List[int] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], which: int,
                   entries: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """(f(x + eps e_j) - f(x - eps e_j)) / (2 eps) for the listed flat entries of one input."""
    target = inputs[which]
    flat = target.data.reshape(-1)
    out = np.zeros(entries.size, dtype=np.float64)
    with no_grad():
        for n, j in enumerate(entries):
            original = flat[j]
            flat[j] = original + eps
            plus = fn(*inputs).item()
            flat[j] = original - eps
            minus = fn(*inputs).item()
            flat[j] = original
            out[n] = (plus - minus) / (2.0 * eps)
    return out


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              rtol: float = 1e-5, max_entries: Optional[int] = None,
              rng: Optional[np.random.Generator] = None) -> GradcheckResult:
    """Compare tape gradients with central differences, input by input.

    An input passes when ||analytic - numeric|| / (||numeric|| + 1e-8) < rtol over
    the checked entries. `max_entries` checks a random subset of each input.

    Args:
        fn: Callable mapping the inputs to a scalar Tensor.
        inputs: float64 tensors; those with requires_grad are checked.
        eps: Finite-difference step.
        rtol: Relative error threshold.
        max_entries: Optional cap on entries per input.
        rng: Generator used to choose the subset.

    Returns:
        GradcheckResult with one relative error per checked input.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("gradcheck requires float64 inputs", f"got {t.dtype}")
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    loss = fn(*inputs)
    if loss.size != 1:
        raise ContractError("gradcheck function must return a scalar", f"got shape {loss.shape}")
    loss.backward()

    rng = rng if rng is not None else np.random.default_rng(0)
    errors, counts = [], []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        if max_entries is not None and t.size > max_entries:
            entries = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        else:
            entries = np.arange(t.size)
        numeric = numerical_grad(fn, inputs, i, entries, eps)
        err = float(np.linalg.norm(analytic[entries] - numeric) / (np.linalg.norm(numeric) + 1e-8))
        errors.append(err)
        counts.append(int(entries.size))
        logger.debug(f"gradcheck input {i}: rel_err={err:.3e} over {entries.size} entries")
    passed = all(e < rtol for e in errors)
    return GradcheckResult(passed=passed, errors=errors, checked_entries=counts)
