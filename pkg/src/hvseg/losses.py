"""Training objective: mixed cross-entropy/Dice reconstruction loss plus a
beta-weighted hierarchical KL term."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1e-5


@dataclass
class LossConfig:
    beta: float = 0.1
    ce_weight: float = 0.4
    dice_weight: float = 0.6

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if abs(self.ce_weight + self.dice_weight - 1.0) > 1e-9:
            raise ValueError(
                f"ce_weight + dice_weight must equal 1, got "
                f"{self.ce_weight} + {self.dice_weight}"
            )


def _check_pair(logits: torch.Tensor, y_onehot: torch.Tensor):
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if logits.shape != y_onehot.shape:
        raise ValueError(
            f"logits shape {tuple(logits.shape)} != target shape "
            f"{tuple(y_onehot.shape)}"
        )


def cross_entropy_loss(logits: torch.Tensor, y_onehot: torch.Tensor) -> torch.Tensor:
    """Categorical cross entropy, mean over pixels. Class dim is -3."""
    _check_pair(logits, y_onehot)
    logp = F.log_softmax(logits, dim=-3)
    per_pixel = -(y_onehot * logp).sum(dim=-3)
    return per_pixel.mean()


def dice_loss(logits: torch.Tensor, y_onehot: torch.Tensor) -> torch.Tensor:
    """1 - soft Dice, averaged over foreground classes (class 0 = background)."""
    _check_pair(logits, y_onehot)
    p = torch.softmax(logits, dim=-3)
    # fold batch dim if present: class dim to front, flatten the rest
    p = p.movedim(-3, 0).reshape(p.shape[-3], -1)
    y = y_onehot.movedim(-3, 0).reshape(y_onehot.shape[-3], -1)
    inter = (p[1:] * y[1:]).sum(dim=1)
    denom = p[1:].sum(dim=1) + y[1:].sum(dim=1)
    dice = (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return 1.0 - dice.mean()


def elbo_loss(trace, y_onehot: torch.Tensor, cfg: LossConfig):
    """Negated beta-ELBO with the CE+Dice reconstruction surrogate.

    Returns (total, breakdown) where breakdown holds the already-weighted
    term tensors; their sum reproduces the total exactly.
    """
    ce = cross_entropy_loss(trace.logits, y_onehot)
    dc = dice_loss(trace.logits, y_onehot)
    kl = trace.kl.reduced
    t_ce = cfg.ce_weight * ce
    t_dice = cfg.dice_weight * dc
    t_kl = cfg.beta * kl
    total = t_ce + t_dice + t_kl
    breakdown = {
        "cross_entropy": t_ce,
        "dice": t_dice,
        "kl": t_kl,
        "cross_entropy_raw": ce,
        "dice_raw": dc,
        "kl_raw": kl,
    }
    return total, breakdown
