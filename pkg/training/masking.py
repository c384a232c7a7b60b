"""Token masking for masked-autoencoder pretraining.

A `MaskPlan` lists the token columns of one sample that get corrupted. The
Gaussian variant adds N(0, noise_std) noise to every channel of a masked
column; the zero-mask ablation replaces masked columns by zeros. Both are
built from constant adds and multiplies, so gradients flow through the
unmasked (and, for the Gaussian variant, masked) columns.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union
import logging

import numpy as np

from autograd import Tensor, functional as F
from utils.error_handling import ContractError, DimensionError

logger = logging.getLogger(__name__)


@dataclass
class MaskPlan:
    """Masked token positions of one sample."""
    indices: np.ndarray
    n_tokens: int
    noise_std: float = 0.2
    mask_ratio: Optional[float] = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_tokens):
            raise ContractError("Mask positions must lie in [0, n_tokens)",
                                f"n_tokens={self.n_tokens}, got range "
                                f"[{self.indices.min()}, {self.indices.max()}]")
        if np.unique(self.indices).size != self.indices.size:
            raise ContractError("Mask positions must be unique")
        if self.noise_std < 0:
            raise ContractError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.mask_ratio is None:
            self.mask_ratio = self.indices.size / max(self.n_tokens, 1)

    @classmethod
    def sample(cls, n_tokens: int, mask_ratio: float, noise_std: float,
               rng: np.random.Generator) -> "MaskPlan":
        """round(mask_ratio * n_tokens) positions drawn without replacement."""
        if not 0 < mask_ratio <= 1:
            raise ContractError(f"mask_ratio must be in (0, 1], got {mask_ratio}")
        count = int(round(mask_ratio * n_tokens))
        indices = np.sort(rng.choice(n_tokens, size=count, replace=False))
        return cls(indices=indices, n_tokens=n_tokens, noise_std=noise_std, mask_ratio=mask_ratio)

    def token_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_tokens, dtype=bool)
        mask[self.indices] = True
        return mask

    def sample_mask(self, n_samples: int, stride: int = 4) -> np.ndarray:
        """Input-sample mask: token i covers samples [stride*i, stride*(i+1))."""
        mask = np.repeat(self.token_mask(), stride)[:n_samples]
        if mask.size < n_samples:
            mask = np.pad(mask, (0, n_samples - mask.size))
        return mask


PlanLike = Union[MaskPlan, Sequence[MaskPlan]]


def sample_plans(batch: int, n_tokens: int, mask_ratio: float, noise_std: float,
                 rng: np.random.Generator) -> List[MaskPlan]:
    return [MaskPlan.sample(n_tokens, mask_ratio, noise_std, rng) for _ in range(batch)]


def _plans_for(tokens: Tensor, plan: PlanLike) -> List[MaskPlan]:
    plans = [plan] if isinstance(plan, MaskPlan) else list(plan)
    batch = 1 if tokens.ndim == 2 else tokens.shape[0]
    if tokens.ndim not in (2, 3) or len(plans) != batch:
        raise DimensionError("Expected (C, n) tokens with one plan or (B, C, n) with B plans",
                             {"tokens": tokens.shape, "plans": len(plans)})
    for p in plans:
        if p.n_tokens != tokens.shape[-1]:
            raise DimensionError("Mask plan length differs from the token axis",
                                 {"plan": p.n_tokens, "tokens": tokens.shape[-1]})
    return plans


def _column_mask(tokens: Tensor, plans: List[MaskPlan]) -> np.ndarray:
    """Broadcastable (B, 1, n) or (1, n) mask of masked columns."""
    mask = np.stack([p.token_mask() for p in plans])[:, None, :]
    return mask[0] if tokens.ndim == 2 else mask


def apply_mask(tokens: Tensor, plan: PlanLike, rng: np.random.Generator) -> Tensor:
    """Add N(0, noise_std) noise to every channel of the masked token columns."""
    plans = _plans_for(tokens, plan)
    mask = _column_mask(tokens, plans)
    std = np.array([p.noise_std for p in plans], dtype=np.float64)
    std = std[:, None, None] if tokens.ndim == 3 else std[0]
    noise = rng.standard_normal(tokens.shape) * std * mask
    return F.add(tokens, Tensor(noise.astype(tokens.dtype), dtype=tokens.dtype))


def zero_mask_variant(tokens: Tensor, plan: PlanLike) -> Tensor:
    """Replace the masked token columns by zeros."""
    plans = _plans_for(tokens, plan)
    keep = (~_column_mask(tokens, plans)).astype(tokens.dtype)
    return F.mul(tokens, Tensor(keep, dtype=tokens.dtype))


def corrupt(tokens: Tensor, plan: PlanLike, rng: np.random.Generator, ablation: str = "none") -> Tensor:
    if ablation == "zero-mask":
        return zero_mask_variant(tokens, plan)
    if ablation != "none":
        raise ContractError(f"Unknown masking ablation {ablation!r}")
    return apply_mask(tokens, plan, rng)


__all__ = ["MaskPlan", "sample_plans", "apply_mask", "zero_mask_variant", "corrupt"]
