"""Prompt injection: concatenate a prompt with a feature and run a transformer block.

The block is the Restormer pairing of multi-head transposed attention (MHTA,
attention across channels) and a gated depth-wise-conv feed-forward layer
(GFL), each wrapped in a pre-norm residual.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .layers import ChannelLayerNorm, check_channels, conv3d, reset_parameters


class MHTA(nn.Module):
    """Multi-head transposed attention with a learnable per-head temperature."""

    def __init__(self, channels: int, heads: int = 2):
        super().__init__()
        if heads < 1 or channels % heads:
            raise ConfigError(f"heads={heads} must divide channels={channels}")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.norm = ChannelLayerNorm(channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1, bias=False)
        self.qkv_dw = conv3d(3 * channels, 3 * channels, 3, bias=False, groups=3 * channels)
        self.project_out = nn.Conv3d(channels, channels, 1, bias=False)
        reset_parameters(self)

    def attention(self, x):
        """Return the head-merged attention output (before projection) and the attention maps."""
        b, c = x.shape[:2]
        spatial = x.shape[2:]
        q, k, v = self.qkv_dw(self.qkv(self.norm(x))).chunk(3, dim=1)
        q, k, v = (t.reshape(b, self.heads, c // self.heads, -1) for t in (q, k, v))
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = F.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        return (attn @ v).reshape(b, c, *spatial), attn

    def forward(self, x):
        out, _ = self.attention(x)
        return x + self.project_out(out)


class GFL(nn.Module):
    """Gated feed-forward: 1x1 expand to 2*gamma*C, depth-wise 3x3x3, SiLU gate, 1x1 back."""

    def __init__(self, channels: int, expansion: float = 2.0):
        super().__init__()
        if expansion < 1:
            raise ConfigError("GFL expansion must be >= 1")
        hidden = int(round(channels * expansion))
        self.norm = ChannelLayerNorm(channels)
        self.project_in = nn.Conv3d(channels, 2 * hidden, 1, bias=False)
        self.dwconv = conv3d(2 * hidden, 2 * hidden, 3, bias=False, groups=2 * hidden)
        self.project_out = nn.Conv3d(hidden, channels, 1, bias=False)
        reset_parameters(self)

    def forward(self, x):
        gate, value = self.dwconv(self.project_in(self.norm(x))).chunk(2, dim=1)
        return x + self.project_out(F.silu(gate) * value)


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, heads: int = 2, expansion: float = 2.0):
        super().__init__()
        self.attn = MHTA(channels, heads)
        self.ffn = GFL(channels, expansion)

    def forward(self, x):
        return self.ffn(self.attn(x))


class PromptInjection(nn.Module):
    """``blocks(reduce(concat(F, P)))`` where reduce is a 3x3x3 conv 2C -> C."""

    def __init__(self, channels: int, heads: int = 2, expansion: float = 2.0, n_blocks: int = 1):
        super().__init__()
        self.channels = channels
        self.reduce = conv3d(2 * channels, channels, 3)
        reset_parameters(self.reduce)
        self.blocks = nn.Sequential(*[TransformerBlock(channels, heads, expansion) for _ in range(n_blocks)])

    def forward(self, feat, prompt):
        check_channels(feat, self.channels, "PromptInjection feature")
        if prompt.shape != feat.shape:
            raise ShapeError(f"prompt shape {tuple(prompt.shape)} does not match feature {tuple(feat.shape)}")
        return self.blocks(self.reduce(torch.cat([feat, prompt], dim=1)))
