"""Residual convolutional encoder/decoder over video chunks.

Chunks are laid out ``B x T x C x H x W``.  The ``frame2D`` variant folds
time into the batch axis; ``video3D`` convolves over time with stride 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .nncore import BatchNorm, Conv, TransposedConv

FRAME2D = "frame2D"
VIDEO3D = "video3D"


@dataclass
class AutoencoderConfig:
    mode: str = VIDEO3D
    input_channels: int = 3
    latent_channels: int = 32
    hidden_channels: int = 128
    first_channels: int = 64
    residual_blocks: int = 5
    spatial_stride: int = 8
    # decoder output offset; inputs are unscaled 0..255
    output_offset: float = 127.5

    def __post_init__(self):
        if self.mode not in (FRAME2D, VIDEO3D):
            raise ValueError(f"mode must be {FRAME2D!r} or {VIDEO3D!r}, got {self.mode!r}")
        if self.spatial_stride != 8:
            raise ValueError("spatial stride is fixed at 8 (three stride-2 layers)")
        for name in ("input_channels", "latent_channels", "hidden_channels", "first_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def dims(self):
        return 2 if self.mode == FRAME2D else 3


def _kernel(cfg, k, temporal=None):
    if cfg.dims == 2:
        return k
    return (k if temporal is None else temporal, k, k)


def _stride(cfg, s):
    return s if cfg.dims == 2 else (1, s, s)


class ResidualBlock(nn.Module):
    """conv-bn-relu-conv-bn, additive skip, relu after the sum."""

    def __init__(self, channels, cfg):
        super().__init__()
        k = _kernel(cfg, 3)
        self.conv1 = Conv(channels, channels, k, dims=cfg.dims)
        self.bn1 = BatchNorm(channels)
        self.conv2 = Conv(channels, channels, k, dims=cfg.dims)
        self.bn2 = BatchNorm(channels)

    def forward(self, x):
        y = torch.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return torch.relu(x + y)


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        d = cfg.dims
        c1, c2 = cfg.first_channels, cfg.hidden_channels
        self.conv1 = Conv(cfg.input_channels, c1, _kernel(cfg, 5), _stride(cfg, 2), d)
        self.bn1 = BatchNorm(c1)
        self.conv2 = Conv(c1, c2, _kernel(cfg, 5), _stride(cfg, 2), d)
        self.bn2 = BatchNorm(c2)
        self.blocks = nn.Sequential(*[ResidualBlock(c2, cfg) for _ in range(cfg.residual_blocks)])
        self.conv3 = Conv(c2, cfg.latent_channels, _kernel(cfg, 3), _stride(cfg, 2), d)

    def forward(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        x = torch.relu(self.bn2(self.conv2(x)))
        return self.conv3(self.blocks(x))


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        d = cfg.dims
        c1, c2 = cfg.first_channels, cfg.hidden_channels
        self.tconv1 = TransposedConv(cfg.latent_channels, c2, _kernel(cfg, 3), _stride(cfg, 2), d)
        self.bn1 = BatchNorm(c2)
        self.blocks = nn.Sequential(*[ResidualBlock(c2, cfg) for _ in range(cfg.residual_blocks)])
        self.tconv2 = TransposedConv(c2, c1, _kernel(cfg, 5), _stride(cfg, 2), d)
        self.bn2 = BatchNorm(c1)
        self.tconv3 = TransposedConv(c1, cfg.input_channels, _kernel(cfg, 5), _stride(cfg, 2), d)
        with torch.no_grad():
            self.tconv3.bias.fill_(cfg.output_offset)

    def forward(self, z):
        z = torch.relu(self.bn1(self.tconv1(z)))
        z = self.blocks(z)
        z = torch.relu(self.bn2(self.tconv2(z)))
        return self.tconv3(z)


class Autoencoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def _to_net(self, x):
        b, t = x.shape[:2]
        if self.cfg.dims == 2:
            return x.reshape(b * t, *x.shape[2:])
        return x.transpose(1, 2)

    def _from_net(self, y, b, t):
        if self.cfg.dims == 2:
            return y.reshape(b, t, *y.shape[1:])
        return y.transpose(1, 2)

    def encode_continuous(self, x):
        """``B x T x C x H x W`` chunk batch to ``B x T x K x H/8 x W/8`` latents."""
        if x.dim() != 5:
            raise ValueError(f"expected B x T x C x H x W input, got shape {tuple(x.shape)}")
        b, t, c, h, w = x.shape
        s = self.cfg.spatial_stride
        if h % s or w % s:
            raise ValueError(f"height and width must be divisible by {s}, got {h} x {w}")
        if c != self.cfg.input_channels:
            raise ValueError(f"expected {self.cfg.input_channels} input channels, got {c}")
        return self._from_net(self.encoder(self._to_net(x)), b, t)

    def decode(self, z_hat):
        if z_hat.dim() != 5 or z_hat.shape[2] != self.cfg.latent_channels:
            raise ValueError(
                f"expected B x T x {self.cfg.latent_channels} x h x w latents, got {tuple(z_hat.shape)}"
            )
        b, t = z_hat.shape[:2]
        return self._from_net(self.decoder(self._to_net(z_hat)), b, t)
