"""Per-level diagonal Gaussian latents: closed-form KL, reparameterized sampling,
and the level-wise decomposition of the hierarchical KL divergence.

All functions here are pure and operate on torch tensors so gradients flow
through them during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class DiagonalGaussianField:
    """Pixel-wise diagonal Gaussian given by mean and log-variance maps.

    Shapes are [..., C, H, W]; mean and log_var must match exactly.
    log_var holds log(sigma^2) and is expected to be clamped to
    [LOG_VAR_MIN, LOG_VAR_MAX] by the producing head.
    """

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape "
                f"{tuple(self.log_var.shape)}"
            )
        if self.mean.dim() < 3:
            raise ValueError(
                f"expected at least 3 dims [C, H, W], got shape {tuple(self.mean.shape)}"
            )

    @property
    def shape(self):
        return self.mean.shape

    def clamped(self) -> "DiagonalGaussianField":
        return DiagonalGaussianField(
            self.mean, self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
        )


@dataclass
class KlReport:
    """Per-level KL values (nats) and their configured reduction."""

    per_level: list = field(default_factory=list)
    reduced: torch.Tensor = None


def _spatial_positions(t: torch.Tensor) -> int:
    # channel dim is -3; everything else (batch and space) counts as a position
    return t.numel() // t.shape[-3]


def gaussian_kl(q: DiagonalGaussianField, p: DiagonalGaussianField) -> torch.Tensor:
    """Closed-form KL(q || p) for diagonal Gaussian fields.

    Reduction: sum over latent channels, mean over spatial (and batch)
    positions, so the value stays comparable across resolutions.
    """
    if q.shape != p.shape:
        raise ValueError(
            f"q shape {tuple(q.shape)} != p shape {tuple(p.shape)}"
        )
    kl = 0.5 * (
        p.log_var
        - q.log_var
        + torch.exp(q.log_var - p.log_var)
        + (q.mean - p.mean) ** 2 * torch.exp(-p.log_var)
        - 1.0
    )
    return kl.sum() / _spatial_positions(q.mean)


def sample_latent(g: DiagonalGaussianField, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw z = mu + sigma * eps, differentiable in (mu, log_var)."""
    if noise.shape != g.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != field shape {tuple(g.shape)}"
        )
    return g.mean + torch.exp(0.5 * g.log_var) * noise


def mean_latent(g: DiagonalGaussianField) -> torch.Tensor:
    """Deterministic latent: the mean map (equivalent to zero noise)."""
    return g.mean


def hierarchical_kl(
    q_levels: list, p_levels: list, reduction: str = "mean"
) -> KlReport:
    """Level-wise KL between two latent hierarchies.

    Each level's parameters are assumed to be conditioned on the single
    sampled ancestor chain from the q branch, so the per-level closed-form KL
    is a one-sample estimate of the level's expected KL term.
    """
    if len(q_levels) != len(p_levels):
        raise ValueError(
            f"level count mismatch: {len(q_levels)} vs {len(p_levels)}"
        )
    if not q_levels:
        raise ValueError("empty level list")
    per_level = [gaussian_kl(q, p) for q, p in zip(q_levels, p_levels)]
    stacked = torch.stack(per_level)
    if reduction == "mean":
        reduced = stacked.mean()
    elif reduction == "sum":
        reduced = stacked.sum()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return KlReport(per_level=per_level, reduced=reduced)
