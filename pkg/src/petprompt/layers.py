"""Small building blocks shared by the prompt, injection and backbone modules.

Feature maps are channels-first ``(B, C, H, W, D)`` tensors throughout.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis at every voxel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        y = (x - mu) / torch.sqrt(var + self.eps)
        shape = (1, -1) + (1,) * (x.dim() - 2)
        return y * self.weight.view(shape) + self.bias.view(shape)


def conv3d(cin: int, cout: int, kernel: int = 3, bias: bool = True, groups: int = 1, stride: int = 1) -> nn.Conv3d:
    return nn.Conv3d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=bias, groups=groups)


def reset_parameters(module: nn.Module) -> None:
    """Fan-in scaled uniform weights and zero biases for every conv/linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def identity_kernel_(conv: nn.Conv3d) -> None:
    """Set a square (or depth-wise) conv to the identity map."""
    with torch.no_grad():
        conv.weight.zero_()
        k = conv.kernel_size
        centre = (k[0] // 2, k[1] // 2, k[2] // 2)
        per_group = conv.weight.shape[1]
        for o in range(conv.out_channels):
            i = o % per_group if conv.groups > 1 else o
            conv.weight[(o, i, *centre)] = 1.0
        if conv.bias is not None:
            conv.bias.zero_()


def broadcast_vector(v, like):
    """Tile a ``(B, C)`` vector over the spatial dims of ``like``."""
    return v.view(*v.shape, 1, 1, 1).expand(-1, -1, *like.shape[2:])


def check_channels(x, channels: int, what: str) -> None:
    from .errors import ShapeError

    if x.dim() != 5:
        raise ShapeError(f"{what}: expected a (B, C, H, W, D) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: expected {channels} channels, got {x.shape[1]}")


def resize_to(x, size):
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="trilinear", align_corners=False)
