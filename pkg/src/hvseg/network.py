"""Encoder-decoder segmentation network with per-level Gaussian latents on
the skip connections.

Two encoders share the same topology: one conditioned on the image (the q
branch, which feeds the decoder) and one conditioned on the label map (the
p branch, used only to supply KL targets during training). At each
resolution level a 1x1 head maps skip features (concatenated with the
pooled ancestor latent) to pixel-wise mean / log-variance maps; latents are
sampled via reparameterization and concatenated with the skip features on
the way into the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .latents import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    DiagonalGaussianField,
    KlReport,
    hierarchical_kl,
    mean_latent,
    sample_latent,
)

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    level_count: int = 3
    encoder_channels: tuple = (32, 64, 128)
    latent_channels: int = 2
    class_count: int = 2
    image_channels: int = 1
    input_size: tuple = (224, 224)
    output_size: tuple = (512, 512)

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.input_size = tuple(self.input_size)
        self.output_size = tuple(self.output_size)
        if self.level_count < 1:
            raise ValueError(f"level_count must be >= 1, got {self.level_count}")
        if len(self.encoder_channels) != self.level_count:
            raise ValueError(
                f"encoder_channels length {len(self.encoder_channels)} != "
                f"level_count {self.level_count}"
            )
        if self.latent_channels < 1:
            raise ValueError(f"latent_channels must be >= 1, got {self.latent_channels}")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        div = 2 ** (self.level_count - 1)
        for name, (h, w) in (("input", self.input_size), ("output", self.output_size)):
            if h % div or w % div:
                raise ValueError(
                    f"{name}_size {h}x{w} not divisible by 2^(level_count-1)={div}"
                )


@dataclass
class ForwardTrace:
    """Everything produced by one training forward pass."""

    logits: torch.Tensor
    q_levels: list
    p_levels: list
    latents: list  # sampled z per level, finest first
    kl: KlReport


def _num_groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """Two 3x3 conv + group norm + ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_num_groups(out_ch), out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_num_groups(out_ch), out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class Encoder(nn.Module):
    """Levels of ConvBlock with 2x max-pool between; returns fine-to-coarse
    skip features at resolutions H/2^i x W/2^i."""

    def __init__(self, in_ch: int, channels):
        super().__init__()
        blocks = []
        prev = in_ch
        for ch in channels:
            blocks.append(ConvBlock(prev, ch))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        skips = []
        h = x
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = self.pool(h)
            h = block(h)
            skips.append(h)
        return skips


class LatentHeads(nn.Module):
    """Per-level 1x1 convolutions emitting mean and log-variance maps.

    Level i > 0 is conditioned on the sampled ancestor latent, average-pooled
    to level-i resolution and concatenated with the skip features.
    """

    def __init__(self, channels, latent_channels: int):
        super().__init__()
        self.latent_channels = latent_channels
        self.heads = nn.ModuleList(
            nn.Conv2d(
                ch + (latent_channels if i > 0 else 0), 2 * latent_channels, 1
            )
            for i, ch in enumerate(channels)
        )

    def field(self, level: int, features, prev_latent=None) -> DiagonalGaussianField:
        if level > 0:
            if prev_latent is None:
                raise ValueError(f"level {level} requires the ancestor latent")
            pooled = F.adaptive_avg_pool2d(prev_latent, features.shape[-2:])
            features = torch.cat([features, pooled], dim=1)
        elif prev_latent is not None:
            raise ValueError("level 0 takes no ancestor latent")
        out = self.heads[level](features)
        mean, log_var = torch.split(out, self.latent_channels, dim=1)
        return DiagonalGaussianField(mean, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))


class Decoder(nn.Module):
    """U-net decoder consuming skip features concatenated with latent samples
    at their native resolutions."""

    def __init__(self, channels, latent_channels: int, class_count: int):
        super().__init__()
        levels = len(channels)
        self.bottom = ConvBlock(channels[-1] + latent_channels, channels[-1])
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(channels[i + 1], channels[i], 2, stride=2)
            for i in reversed(range(levels - 1))
        )
        self.blocks = nn.ModuleList(
            ConvBlock(2 * channels[i] + latent_channels, channels[i])
            for i in reversed(range(levels - 1))
        )
        self.head = nn.Conv2d(channels[0], class_count, 1)

    def forward(self, skips, latents):
        levels = len(skips)
        h = self.bottom(torch.cat([skips[-1], latents[-1]], dim=1))
        for j, i in enumerate(reversed(range(levels - 1))):
            h = self.ups[j](h)
            h = self.blocks[j](torch.cat([h, skips[i], latents[i]], dim=1))
        return self.head(h)


class SegmentationModel(nn.Module):
    """The full uncertainty-aware segmentation network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        lat = config.latent_channels
        self.image_encoder = Encoder(config.image_channels, ch)
        self.image_heads = LatentHeads(ch, lat)
        self.label_encoder = Encoder(config.class_count, ch)
        self.label_heads = LatentHeads(ch, lat)
        self.decoder = Decoder(ch, lat, config.class_count)
        self.resample_output = config.input_size != config.output_size
        if self.resample_output:
            self.output_head = nn.Conv2d(config.class_count, config.class_count, 1)

    # ---- building blocks -------------------------------------------------

    def encode_image(self, x: torch.Tensor):
        """Skip features per level; rejects inputs at the wrong resolution."""
        if x.shape[-2:] != torch.Size(self.config.input_size):
            raise ValueError(
                f"expected input size {self.config.input_size}, got "
                f"{tuple(x.shape[-2:])}"
            )
        if x.shape[-3] != self.config.image_channels:
            raise ValueError(
                f"expected {self.config.image_channels} image channels, got "
                f"{x.shape[-3]}"
            )
        return self.image_encoder(x)

    def latent_head(self, level: int, features, prev_latent=None):
        return self.image_heads.field(level, features, prev_latent)

    def _sample_chain(self, skips, noise_fn):
        """Walk the q-branch heads fine-to-coarse, sampling each level
        conditioned on the previous sample. noise_fn(field) -> eps tensor."""
        q_levels, latents = [], []
        z = None
        for i, feat in enumerate(skips):
            g = self.image_heads.field(i, feat, z if i > 0 else None)
            z = sample_latent(g, noise_fn(g))
            q_levels.append(g)
            latents.append(z)
        return q_levels, latents

    def encode_segmentation(self, y_onehot: torch.Tensor, q_latents):
        """p-branch Gaussian fields conditioned on the q-branch samples."""
        self._check_onehot(y_onehot)
        y = y_onehot
        if y.shape[-2:] != torch.Size(self.config.input_size):
            y = F.interpolate(y, size=self.config.input_size, mode="nearest")
        skips = self.label_encoder(y)
        p_levels = []
        for i, feat in enumerate(skips):
            prev = q_latents[i - 1] if i > 0 else None
            p_levels.append(self.label_heads.field(i, feat, prev))
        return p_levels

    def decode(self, skips, latents) -> torch.Tensor:
        for i, (s, z) in enumerate(zip(skips, latents)):
            if s.shape[-2:] != z.shape[-2:]:
                raise ValueError(
                    f"level {i}: latent size {tuple(z.shape[-2:])} != skip size "
                    f"{tuple(s.shape[-2:])}"
                )
        logits = self.decoder(skips, latents)
        if self.resample_output:
            logits = F.interpolate(
                logits, size=self.config.output_size, mode="bilinear",
                align_corners=False,
            )
            logits = self.output_head(logits)
        return logits

    def _check_onehot(self, y: torch.Tensor):
        if y.shape[-3] != self.config.class_count:
            raise ValueError(
                f"expected {self.config.class_count} label channels, got {y.shape[-3]}"
            )
        ok = ((y == 0) | (y == 1)).all() and torch.all(y.sum(dim=-3) == 1)
        if not ok:
            raise ValueError("label tensor is not one-hot")

    # ---- training and inference -----------------------------------------

    def forward_train(
        self, x: torch.Tensor, y_onehot: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> ForwardTrace:
        skips = self.encode_image(x)

        def noise_fn(g):
            return torch.randn(
                g.shape, generator=generator, dtype=g.mean.dtype, device=g.mean.device
            )

        q_levels, latents = self._sample_chain(skips, noise_fn)
        p_levels = self.encode_segmentation(y_onehot, latents)
        kl = hierarchical_kl(q_levels, p_levels)
        logits = self.decode(skips, latents)
        return ForwardTrace(
            logits=logits, q_levels=q_levels, p_levels=p_levels,
            latents=latents, kl=kl,
        )

    def _prepare(self, x) -> torch.Tensor:
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(x)
        x = x.float()
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return x

    @torch.no_grad()
    def prior_trace(self, x):
        """Deterministic forward using mean latents at every level."""
        x = self._prepare(x)
        skips = self.encode_image(x)
        q_levels, latents = [], []
        z = None
        for i, feat in enumerate(skips):
            g = self.image_heads.field(i, feat, z if i > 0 else None)
            z = mean_latent(g)
            q_levels.append(g)
            latents.append(z)
        logits = self.decode(skips, latents)
        return logits, q_levels, latents

    @torch.no_grad()
    def predict_prior(self, x) -> np.ndarray:
        """Single deterministic label map from the latent means."""
        self.eval()
        logits, _, _ = self.prior_trace(x)
        return logits.argmax(dim=1)[0].cpu().numpy()

    @torch.no_grad()
    def predict_samples(
        self, x, n: int, seed: int = 0, zero_noise: bool = False
    ) -> np.ndarray:
        """n label maps from independent latent draws, [n, H, W], seeded."""
        if n < 1:
            raise ValueError(f"sample count must be >= 1, got {n}")
        self.eval()
        x = self._prepare(x)
        generator = torch.Generator().manual_seed(seed)
        skips = self.encode_image(x)

        def noise_fn(g):
            if zero_noise:
                return torch.zeros(g.shape, dtype=g.mean.dtype, device=g.mean.device)
            return torch.randn(
                g.shape, generator=generator, dtype=g.mean.dtype, device=g.mean.device
            )

        out = []
        for _ in range(n):
            _, latents = self._sample_chain(skips, noise_fn)
            logits = self.decode(skips, latents)
            out.append(logits.argmax(dim=1)[0].cpu().numpy())
        return np.stack(out)


# ---- checkpoint io -------------------------------------------------------


def save_checkpoint(model: SegmentationModel, path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> SegmentationModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    for key in ("format_version", "config", "state_dict"):
        if key not in payload:
            raise ValueError(f"checkpoint {path}: missing field {key!r}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint {path}: unsupported format version "
            f"{payload['format_version']}"
        )
    config = ModelConfig(**payload["config"])
    model = SegmentationModel(config)
    model.load_state_dict(payload["state_dict"])
    return model
