"""Hybrid segmentation loss: binary cross entropy + Dice + focal, plus the
combined detection/segmentation objective used for reporting."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LossWeights:
    w_bce: float = 1.0
    w_dice: float = 1.0
    w_focal: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    epsilon: float = 1e-6

    def __post_init__(self):
        if min(self.w_bce, self.w_dice, self.w_focal, self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0.0 <= self.focal_alpha <= 1.0):
            raise ValueError("focal_alpha must lie in [0,1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def bce_loss(pred: torch.Tensor, target: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """Mean pixel binary cross entropy on probabilities clamped to [eps, 1-eps]."""
    _check_pair(pred, target)
    p = pred.clamp(epsilon, 1.0 - epsilon)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    _check_pair(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + epsilon) / (pred.sum() + target.sum() + epsilon)


def focal_loss(pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
               alpha: float = 0.25, epsilon: float = 1e-6) -> torch.Tensor:
    """Mean of -alpha_t * (1 - p_t)^gamma * log(p_t)."""
    _check_pair(pred, target)
    p = pred.clamp(epsilon, 1.0 - epsilon)
    p_t = torch.where(target > 0.5, p, 1.0 - p)
    alpha_t = torch.where(target > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def hybrid_loss(pred: torch.Tensor, target: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """w_bce*BCE + w_dice*Dice + w_focal*Focal."""
    if weights.w_bce + weights.w_dice + weights.w_focal <= 0:
        raise ValueError("at least one hybrid loss weight must be positive")
    _check_pair(pred, target)
    total = pred.new_zeros(())
    if weights.w_bce:
        total = total + weights.w_bce * bce_loss(pred, target, weights.epsilon)
    if weights.w_dice:
        total = total + weights.w_dice * dice_loss(pred, target, weights.epsilon)
    if weights.w_focal:
        total = total + weights.w_focal * focal_loss(pred, target, weights.focal_gamma,
                                                     weights.focal_alpha, weights.epsilon)
    return total


def combined_objective(det_loss: float, seg_loss: float, l2_norm: float,
                       weights: LossWeights) -> float:
    """Reporting scalar lambda1*det + lambda2*seg + lambda3*l2. The pipeline
    trains its stages sequentially; this is not an optimization target."""
    for name, v in (("det_loss", det_loss), ("seg_loss", seg_loss), ("l2_norm", l2_norm)):
        if not (v >= 0 and v == v and v != float("inf")):
            raise ValueError(f"{name} must be finite and non-negative, got {v}")
    return weights.lambda1 * det_loss + weights.lambda2 * seg_loss + weights.lambda3 * l2_norm
