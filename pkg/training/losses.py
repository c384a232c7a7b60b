"""Training objectives.

- `recon_loss`: squared error over the masked input spans, averaged over the
  summed scalars.
- `supcon_loss`: supervised contrastive loss over cosine similarities, with
  A(i) = batch minus i and P(i) = same-label members of A(i).
- `ce_loss`: mean cross-entropy via log-sum-exp.
- `total_loss`: alpha * supcon + (1 - alpha) * ce.
"""

from dataclasses import dataclass
from typing import Optional, Tuple
import logging

import numpy as np

from autograd import Tensor, functional as F
from models import TOKENIZER_STRIDE
from utils.error_handling import ContractError, DimensionError
from .masking import MaskPlan, PlanLike

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def recon_loss(x, x_hat: Tensor, plan: PlanLike, stride: int = TOKENIZER_STRIDE) -> Tensor:
    """Mean squared error over the input samples covered by masked tokens.

    Args:
        x: Target signal, (L, D) or (B, L, D).
        x_hat: Reconstruction of the same shape.
        plan: One MaskPlan, or one per batch element.
        stride: Input samples per token.

    Returns:
        Scalar tensor; 0 when nothing is masked.
    """
    x = _as_tensor(x, like=x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError("Reconstruction shape differs from the target", {"x": x.shape, "x_hat": x_hat.shape})
    plans = [plan] if isinstance(plan, MaskPlan) else list(plan)
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or len(plans) != (x.shape[0] if batched else 1):
        raise DimensionError("Expected (L, D) with one plan or (B, L, D) with B plans",
                             {"x": x.shape, "plans": len(plans)})
    samples = x.shape[-1]
    mask = np.stack([p.sample_mask(samples, stride) for p in plans])[:, None, :]
    if not batched:
        mask = mask[0]
    count = int(mask.sum()) * x.shape[-2]
    weight = Tensor(mask.astype(x_hat.dtype), dtype=x_hat.dtype)
    if count == 0:
        return F.sum(F.mul(x_hat, Tensor(np.zeros(x_hat.shape), dtype=x_hat.dtype)))
    diff = F.sub(x_hat, x)
    return F.sum(F.mul(F.mul(diff, diff), weight)) * (1.0 / count)


def cosine_sim(z1, z2) -> Tensor:
    """z1 . z2 / (|z1| |z2|), with norms floored at 1e-12 (a zero vector gives 0)."""
    z1 = _as_tensor(z1)
    z2 = _as_tensor(z2, like=z1)
    if z1.shape != z2.shape or z1.ndim != 1:
        raise DimensionError("cosine_sim expects two vectors of equal length", {"z1": z1.shape, "z2": z2.shape})
    n1 = F.clamp_min(F.sqrt(F.sum(F.mul(z1, z1))), NORM_FLOOR)
    n2 = F.clamp_min(F.sqrt(F.sum(F.mul(z2, z2))), NORM_FLOOR)
    return F.sum(F.mul(z1, z2)) / (n1 * n2)


def cosine_matrix(z: Tensor) -> Tensor:
    """(B, B) pairwise cosine similarities of the rows of z."""
    norms = F.clamp_min(F.sqrt(F.sum(F.mul(z, z), axis=1, keepdims=True)), NORM_FLOOR)
    unit = F.div(z, norms)
    return F.matmul(unit, F.swapaxes(unit, 0, 1))


def positive_pairs(labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(anchor, positive) index pairs and the per-anchor positive counts."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    anchors, positives = np.nonzero(same)
    return anchors, positives, same.sum(axis=1)


def supcon_terms(embeddings: Tensor, labels: np.ndarray, tau: float) -> Tuple[Tensor, int]:
    """Supervised contrastive loss and the number of anchors that have positives.

    Anchors without positives are left out of both the sum and the average.
    """
    if tau <= 0:
        raise ContractError(f"Temperature must be positive, got {tau}")
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or labels.shape != (embeddings.shape[0],):
        raise DimensionError("supcon expects (B, D) embeddings and (B,) labels",
                             {"embeddings": embeddings.shape, "labels": labels.shape})
    batch = embeddings.shape[0]
    anchors, positives, counts = positive_pairs(labels)
    valid = int((counts > 0).sum())
    if batch < 2 or valid == 0:
        return Tensor(0.0, dtype=embeddings.dtype), 0

    logits = cosine_matrix(embeddings) * (1.0 / tau)
    self_mask = np.where(np.eye(batch, dtype=bool), -np.inf, 0.0).astype(embeddings.dtype)
    log_prob = F.log_softmax(logits + self_mask, axis=1)
    picked = F.index(log_prob, (anchors, positives))
    weights = (1.0 / (counts[anchors] * valid)).astype(embeddings.dtype)
    return F.neg(F.sum(F.mul(picked, Tensor(weights, dtype=embeddings.dtype)))), valid


def supcon_loss(embeddings: Tensor, labels: np.ndarray, tau: float = 0.07) -> Tensor:
    loss, valid = supcon_terms(embeddings, labels, tau)
    if valid == 0:
        logger.warning("No anchor in the batch has a positive; contrastive term is 0")
    return loss


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return F.cross_entropy(logits, labels)


@dataclass
class LossBreakdown:
    """Combined objective plus its components (floats for logging)."""
    total: Tensor
    supcon: float
    ce: float
    valid_anchors: int

    @property
    def degenerate(self) -> bool:
        """True when no anchor had a positive, so the contrastive term was 0."""
        return self.valid_anchors == 0


def total_loss(embeddings: Tensor, logits: Tensor, labels: np.ndarray,
               alpha: float = 0.5, tau: float = 0.07) -> LossBreakdown:
    """alpha * supcon + (1 - alpha) * ce; the endpoints return one term exactly."""
    if not 0 <= alpha <= 1:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    ce = ce_loss(logits, labels)
    if alpha == 0:
        # logged only; the contrastive term stays off the tape
        supcon, valid = supcon_terms(embeddings.detach(), labels, tau)
        return LossBreakdown(total=ce, supcon=supcon.item(), ce=ce.item(), valid_anchors=valid)
    supcon, valid = supcon_terms(embeddings, labels, tau)
    if valid == 0:
        logger.warning("No anchor in the batch has a positive; contrastive term is 0")
    if alpha == 1:
        total = supcon
    else:
        total = supcon * alpha + ce * (1.0 - alpha)
    return LossBreakdown(total=total, supcon=supcon.item(), ce=ce.item(), valid_anchors=valid)


__all__ = ["recon_loss", "cosine_sim", "cosine_matrix", "positive_pairs", "supcon_terms", "supcon_loss",
           "ce_loss", "total_loss", "LossBreakdown", "NORM_FLOOR"]
