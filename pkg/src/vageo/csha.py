"""Channel-spatial hybrid attention over the query feature map."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class CSHAConfig:
    reduction: int = 16
    kernel_size: int = 7
    spatial_relu: bool = True  # ReLU before the sigmoid keeps spatial weights in [0.5, 1)
    use_channel: bool = True
    use_spatial: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"spatial kernel size must be odd, got {self.kernel_size}")
        if self.reduction < 1:
            raise ValueError(f"reduction must be >= 1, got {self.reduction}")


def hidden_width(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.channels = channels
        hidden = hidden_width(channels, reduction)
        self.fc1 = nn.Linear(channels, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, channels, bias=False)

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the reweighted features and the B x C weights in (0, 1)."""
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ValueError(f"expected B x {self.channels} x H x W, got {tuple(f.shape)}")
        pooled = f.mean(dim=(2, 3))
        weights = torch.sigmoid(self.fc2(torch.relu(self.fc1(pooled))))
        return f * weights[:, :, None, None], weights


def pool_pair(f: torch.Tensor) -> torch.Tensor:
    """Per-pixel channel mean and max stacked as a B x 2 x H x W tensor."""
    return torch.cat([f.mean(dim=1, keepdim=True), f.amax(dim=1, keepdim=True)], dim=1)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7, relu: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"spatial kernel size must be odd, got {kernel_size}")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=True)
        self.bn = nn.BatchNorm2d(1, eps=eps, momentum=momentum)
        self.relu = relu

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.bn(self.conv(pool_pair(f)))
        if self.relu:
            z = torch.relu(z)
        weights = torch.sigmoid(z)
        return f * weights, weights


class CSHA(nn.Module):
    """Channel attention followed by spatial attention; shape preserving."""

    def __init__(self, channels: int, config: CSHAConfig | None = None):
        super().__init__()
        config = config or CSHAConfig()
        self.config = config
        self.channel = ChannelAttention(channels, config.reduction) if config.use_channel else None
        self.spatial = SpatialAttention(config.kernel_size, config.spatial_relu) if config.use_spatial else None

    def forward_with_maps(self, f: torch.Tensor):
        cw = sw = None
        if self.channel is not None:
            f, cw = self.channel(f)
        if self.spatial is not None:
            f, sw = self.spatial(f)
        return f, cw, sw

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.forward_with_maps(f)[0]


def zero_(module: CSHA) -> CSHA:
    """Zero every attention parameter and reset batchnorm to identity statistics."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
        if module.spatial is not None:
            module.spatial.bn.reset_running_stats()
            module.spatial.bn.weight.fill_(1.0)
            module.spatial.bn.bias.zero_()
    return module
