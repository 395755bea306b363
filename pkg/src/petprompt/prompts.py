"""Count-level prior prompt, learnable general denoising prompt, and their fusion.

* :class:`CLPPrompt` maps the scalar count fraction to a length-M vector with a
  three-layer MLP.
* :class:`GPDPrompt` mixes N learnable prompt volumes with softmax weights
  predicted from the globally pooled input feature, then applies a 3x3x3 conv.
* :class:`PromptFusion` lets the general prompt (query) attend over the
  count-level prompt (key/value) with channel-token cross-attention.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .layers import ChannelLayerNorm, broadcast_vector, check_channels, conv3d, reset_parameters, resize_to


def delta_tensor(delta, batch: int, like: torch.Tensor) -> torch.Tensor:
    """Coerce a scalar or per-sample count level into a validated ``(B,)`` tensor."""
    d = torch.as_tensor(delta, dtype=like.dtype, device=like.device).reshape(-1)
    if d.numel() == 1 and batch > 1:
        d = d.expand(batch)
    if d.numel() != batch:
        raise ShapeError(f"got {d.numel()} count levels for a batch of {batch}")
    if not torch.all((d > 0) & (d <= 1)):
        raise ValueError(f"count level delta must lie in (0, 1], got {d.tolist()}")
    return d


class CLPPrompt(nn.Module):
    """Three fully connected layers, 1 -> hidden -> hidden -> M."""

    def __init__(self, dim: int = 64, hidden: int = 64, activation: str = "relu"):
        super().__init__()
        if dim < 1 or hidden < 1:
            raise ValueError("CLP widths must be positive")
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, dim)
        self.act = nn.ReLU() if activation == "relu" else nn.Identity()
        self.dim = dim
        reset_parameters(self)

    def forward(self, delta):
        d = delta_tensor(delta, torch.as_tensor(delta).numel(), self.fc1.weight)
        h = self.act(self.fc1(d[:, None]))
        h = self.act(self.fc2(h))
        return self.fc3(h)


class GPDPrompt(nn.Module):
    """Feature-conditioned convex combination of N learnable prompt volumes.

    The components live at ``base_size`` and are trilinearly resized to the
    feature's spatial dims, so one parameterization serves any input size.
    """

    def __init__(self, channels: int, n_components: int = 3, base_size=(8, 8, 4), component_std: float = 0.02):
        super().__init__()
        if n_components < 1:
            raise ValueError("need at least one prompt component")
        self.channels = channels
        self.n_components = n_components
        self.components = nn.Parameter(torch.empty(n_components, channels, *base_size))
        self.weight_head = nn.Conv3d(channels, n_components, 1)
        self.out_conv = conv3d(channels, channels, 3, bias=False)
        reset_parameters(self)
        nn.init.normal_(self.components, 0.0, component_std)

    def weights(self, feat):
        pooled = feat.mean(dim=(2, 3, 4), keepdim=True)
        return F.softmax(self.weight_head(pooled).flatten(1), dim=1)

    def forward(self, feat):
        """Return ``(prompt, weights)``: a feature-shaped prompt and the (B, N) mixing weights."""
        check_channels(feat, self.channels, "GPDPrompt")
        w = self.weights(feat)
        mixed = torch.einsum("bn,nchwd->bchwd", w, self.components)
        prompt = self.out_conv(resize_to(mixed, feat.shape[2:]))
        return prompt, w


class PromptFusion(nn.Module):
    """Cross-attention from the general prompt to the count-level prompt.

    Tokens are channels: Q, K, V are reshaped to ``(B, C, h*w*d)`` and the
    C x C attention is scaled by ``1/sqrt(h*w*d)``. The count-level vector is
    linearly projected to C channels and broadcast over space before the
    key (1x1x1 conv) and value (3x3x3 depth-wise conv) paths.
    """

    def __init__(self, channels: int, clp_dim: int):
        super().__init__()
        self.channels = channels
        self.clp_dim = clp_dim
        self.norm = ChannelLayerNorm(channels)
        self.q = nn.Conv3d(channels, channels, 1)
        self.k_proj = nn.Linear(clp_dim, channels)
        self.k = nn.Conv3d(channels, channels, 1)
        self.v_proj = nn.Linear(clp_dim, channels)
        self.v = conv3d(channels, channels, 3, groups=channels)
        reset_parameters(self)

    def project(self, prompt_g, prompt_c):
        """Q, K, V maps, each ``(B, C, h, w, d)``."""
        check_channels(prompt_g, self.channels, "PromptFusion query")
        if prompt_c.dim() != 2 or prompt_c.shape[1] != self.clp_dim:
            raise ShapeError(f"PromptFusion: expected a (B, {self.clp_dim}) count prompt, got {tuple(prompt_c.shape)}")
        if prompt_c.shape[0] != prompt_g.shape[0]:
            raise ShapeError("PromptFusion: batch sizes of the two prompts differ")
        q = self.q(self.norm(prompt_g))
        k = self.k(broadcast_vector(self.k_proj(prompt_c), prompt_g))
        v = self.v(broadcast_vector(self.v_proj(prompt_c), prompt_g))
        return q, k, v

    def forward(self, prompt_g, prompt_c, return_attention: bool = False):
        q, k, v = self.project(prompt_g, prompt_c)
        out, attn = channel_cross_attention(q, k, v)
        return (out, attn) if return_attention else out


def channel_cross_attention(q, k, v):
    """``softmax(Q K^T / sqrt(d_k)) V`` over channel tokens, d_k = number of voxels."""
    b, c = q.shape[:2]
    spatial = q.shape[2:]
    n = math.prod(spatial)
    qf, kf, vf = (t.reshape(b, c, n) for t in (q, k, v))
    attn = F.softmax(qf @ kf.transpose(1, 2) / math.sqrt(n), dim=-1)
    return (attn @ vf).reshape(b, c, *spatial), attn


class CLPBroadcast(nn.Module):
    """Count-level-only prompt: project P_C to C channels and tile it over space."""

    def __init__(self, channels: int, clp_dim: int):
        super().__init__()
        self.proj = nn.Linear(clp_dim, channels)
        reset_parameters(self)

    def forward(self, prompt_c, like):
        return broadcast_vector(self.proj(prompt_c), like)
