"""Hierarchical variational uncertainty estimation for image segmentation."""

from .latents import (
    DiagonalGaussianField,
    KlReport,
    gaussian_kl,
    hierarchical_kl,
    mean_latent,
    sample_latent,
)
from .losses import LossConfig, cross_entropy_loss, dice_loss, elbo_loss
from .network import (
    ForwardTrace,
    ModelConfig,
    SegmentationModel,
    load_checkpoint,
    save_checkpoint,
)
from .data import SegmentationCase, ToySpec, make_toy_dataset
from .harness import TrainConfig, EvalReport

__all__ = [
    "DiagonalGaussianField",
    "KlReport",
    "gaussian_kl",
    "hierarchical_kl",
    "mean_latent",
    "sample_latent",
    "LossConfig",
    "cross_entropy_loss",
    "dice_loss",
    "elbo_loss",
    "ForwardTrace",
    "ModelConfig",
    "SegmentationModel",
    "load_checkpoint",
    "save_checkpoint",
    "SegmentationCase",
    "ToySpec",
    "make_toy_dataset",
    "TrainConfig",
    "EvalReport",
]
