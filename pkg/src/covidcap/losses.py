"""Training objectives: stable binary classification loss, the normalized
attention-supervision loss, and their class-dependent combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

# Guards the 0/0 case of the attention loss (no demanded and no produced
# attention); applied only there so nonzero hand values stay exact.
ATTENTION_EPS = 1e-8

COVID_LABEL = 1.0
CAP_LABEL = 0.0

DEFAULT_ATTENTION_WEIGHT = 0.5


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch loss terms; ``attention`` is None when no COVID sample
    contributed one."""

    classification: float
    attention: float | None
    weight: float
    total: float


def classification_loss(logit, label) -> torch.Tensor:
    """Binary cross-entropy of sigmoid(logit) against label, computed in the
    numerically stable softplus form.  Broadcasts over any matching shapes."""
    if not torch.is_tensor(logit):
        logit = torch.as_tensor(logit, dtype=torch.float64)
    elif not logit.is_floating_point():
        logit = logit.double()
    label = torch.as_tensor(label, dtype=logit.dtype, device=logit.device)
    if label.shape != logit.shape:
        raise ValueError(f"logit shape {tuple(logit.shape)} != label shape {tuple(label.shape)}")
    return F.binary_cross_entropy_with_logits(logit, label, reduction="none")


def attention_loss(mask: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Normalized squared error between a soft mask and the infection mask:
    sum((T - M)^2) / (sum(T) + sum(M)), reduced over the last three axes.

    Both inputs take values in [0, 1], so the result does too; an all-empty
    pair (denominator 0) scores 0.
    """
    if not torch.is_tensor(mask):
        mask = torch.as_tensor(np.asarray(mask, dtype=np.float64))
    target = torch.as_tensor(
        np.asarray(target, dtype=np.float64) if not torch.is_tensor(target) else target,
        dtype=mask.dtype,
        device=mask.device,
    )
    if mask.shape != target.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} != target shape {tuple(target.shape)}")
    if mask.dim() < 3:
        raise ValueError(f"expected (..., D, H, W) maps, got shape {tuple(mask.shape)}")
    dims = (-3, -2, -1)
    num = ((mask - target) ** 2).sum(dims)
    den = mask.sum(dims) + target.sum(dims)
    return torch.where(den > ATTENTION_EPS, num / den.clamp_min(ATTENTION_EPS), torch.zeros_like(num))


def total_loss(
    cls_loss: torch.Tensor,
    attn_loss: torch.Tensor | None,
    label,
    weight: float = DEFAULT_ATTENTION_WEIGHT,
) -> torch.Tensor:
    """Combine per-sample losses: COVID samples (label 1) add ``weight`` times
    the attention term; CAP samples use the classification term alone."""
    if not torch.is_tensor(cls_loss):
        cls_loss = torch.as_tensor(cls_loss, dtype=torch.float64)
    label = torch.as_tensor(label, device=cls_loss.device)
    if label.shape != cls_loss.shape:
        raise ValueError(f"loss shape {tuple(cls_loss.shape)} != label shape {tuple(label.shape)}")
    is_covid = label > 0.5
    if attn_loss is None:
        if bool(is_covid.any()) and weight != 0.0:
            raise ValueError("COVID samples require an attention loss term")
        return cls_loss.clone()
    if not torch.is_tensor(attn_loss):
        attn_loss = torch.as_tensor(attn_loss, dtype=cls_loss.dtype, device=cls_loss.device)
    else:
        attn_loss = attn_loss.to(dtype=cls_loss.dtype, device=cls_loss.device)
    if attn_loss.shape != cls_loss.shape:
        raise ValueError(f"attention loss shape {tuple(attn_loss.shape)} != {tuple(cls_loss.shape)}")
    return cls_loss + weight * attn_loss * is_covid.to(cls_loss.dtype)


def batch_objective(
    logits: torch.Tensor,
    labels: torch.Tensor,
    attn_losses: torch.Tensor | None = None,
    weight: float = DEFAULT_ATTENTION_WEIGHT,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Mean classification loss plus ``weight`` times the mean attention loss
    over the batch's COVID samples (when any).  Returns the scalar objective
    and a float breakdown for logging."""
    cls = classification_loss(logits, labels)
    objective = cls.mean()
    attn_mean: torch.Tensor | None = None
    is_covid = torch.as_tensor(labels) > 0.5
    if attn_losses is not None and bool(is_covid.any()) and weight != 0.0:
        attn_losses = torch.as_tensor(attn_losses)
        if attn_losses.shape != cls.shape:
            raise ValueError(
                f"attention loss shape {tuple(attn_losses.shape)} != batch shape {tuple(cls.shape)}"
            )
        attn_mean = attn_losses[is_covid].mean()
        objective = objective + weight * attn_mean
    breakdown = LossBreakdown(
        classification=float(cls.mean().detach()),
        attention=None if attn_mean is None else float(attn_mean.detach()),
        weight=float(weight),
        total=float(objective.detach()),
    )
    return objective, breakdown
