"""Three-level 2D U-Net with an exposed bottleneck and optional skip connections.

Encoder levels are conv + batch norm + LeakyReLU with the feature count
doubling per level; the decoder mirrors them with transposed convolutions and
a sigmoid output head. Skip connections are disabled whenever the contrastive
loss is in play (they leak low-level detail past the bottleneck) and are only
an option for the fully supervised baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_features: int = 16
    patch_size: int = 64          # paper-scale inputs are 400x400
    skip_connections: bool = False
    negative_slope: float = 0.1
    projection_dim: int = 32
    projection_hidden: int = 64

    def __post_init__(self):
        if self.levels != 3:
            raise ValueError("the segmentation model is a three-level U-Net")
        if self.patch_size % (2 ** self.levels) != 0:
            raise ValueError(f"patch size must be divisible by {2 ** self.levels}")
        if self.base_features < 1:
            raise ValueError("base_features must be >= 1")

    @property
    def encoder_channels(self) -> tuple:
        return tuple(self.base_features * 2**k for k in range(self.levels))

    @property
    def bottleneck_channels(self) -> int:
        return self.encoder_channels[-1]


def _enc_block(cin: int, cout: int, stride: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(slope, inplace=True),
    )


def _dec_block(cin: int, cout: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, kernel_size=2, stride=2, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(slope, inplace=True),
    )


class UNet(nn.Module):
    """Segmentation U-Net; ``forward`` returns probabilities in (0, 1)."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.encoder_channels
        s = cfg.negative_slope
        self.enc1 = _enc_block(1, c1, stride=1, slope=s)
        self.enc2 = _enc_block(c1, c2, stride=2, slope=s)
        self.enc3 = _enc_block(c2, c3, stride=2, slope=s)
        self.dec2 = _dec_block(c3, c2, slope=s)
        self.dec1 = _dec_block(c2 + (c2 if cfg.skip_connections else 0), c1, slope=s)
        fuse_in = c1 + (c1 if cfg.skip_connections else 0)
        self.head = nn.Conv2d(fuse_in, 1, kernel_size=1)

    def encode(self, x: torch.Tensor):
        f1 = self.enc1(x)
        f2 = self.enc2(f1)
        f3 = self.enc3(f2)
        return f1, f2, f3

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        """Deepest feature map, the attachment point for the contrastive loss."""
        return self.encode(x)[2]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f1, f2, f3 = self.encode(x)
        d2 = self.dec2(f3)
        if self.cfg.skip_connections:
            d2 = torch.cat([d2, f2], dim=1)
        d1 = self.dec1(d2)
        if self.cfg.skip_connections:
            d1 = torch.cat([d1, f1], dim=1)
        return torch.sigmoid(self.head(d1))


class ProjectionHead(nn.Module):
    """One-hidden-layer MLP mapping pooled bottleneck features to the unit sphere."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(cfg.bottleneck_channels, cfg.projection_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.projection_hidden, cfg.projection_dim),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        pooled = features.mean(dim=(2, 3))
        z = self.mlp(pooled)
        return nn.functional.normalize(z, dim=1)


def build_model(cfg: UNetConfig) -> tuple[UNet, ProjectionHead]:
    """Instantiate the U-Net and its contrastive projection head."""
    return UNet(cfg), ProjectionHead(cfg)
