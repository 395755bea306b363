"""3D U-shape denoiser with prompt modules on its skip connections.

Modes:

``dual``  fuse the general prompt with the count-level prompt, then inject
``gpd``   inject the general (blind) prompt only
``clp``   inject the broadcast count-level prompt only
``film``  per-channel scale/shift of the skip tensor from an MLP of delta
          (a stand-in for a count-conditional baseline)
``none``  plain U-Net, delta is never read
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .injection import PromptInjection
from .layers import check_channels, conv3d, reset_parameters
from .prompts import CLPBroadcast, CLPPrompt, GPDPrompt, PromptFusion, delta_tensor

MODES = ("dual", "gpd", "clp", "film", "none")
DELTA_MODES = ("dual", "clp", "film")


@dataclass
class PromptConfig:
    n_components: int = 3
    clp_dim: int = 64
    clp_hidden: int = 64
    heads: int = 2
    expansion: float = 2.0
    n_blocks: int = 1
    base_size: tuple[int, int, int] = (8, 8, 4)
    film_hidden: int = 64


@dataclass
class ModelConfig:
    levels: int = 3
    base_channels: int = 16
    mode: str = "dual"
    prompt: PromptConfig = field(default_factory=PromptConfig)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if isinstance(self.prompt, dict):
            self.prompt = PromptConfig(**{k: tuple(v) if k == "base_size" else v for k, v in self.prompt.items()})
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.levels < 1 or self.base_channels < 1:
            raise ConfigError("levels and base_channels must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt"]["base_size"] = list(self.prompt.base_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def group_count(channels: int, groups: int = 8) -> int:
    return math.gcd(groups, channels)


class ConvBlock(nn.Module):
    """Two 3x3x3 conv + GroupNorm + SiLU layers with a residual connection."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = conv3d(cin, cout)
        self.norm1 = nn.GroupNorm(group_count(cout), cout)
        self.conv2 = conv3d(cout, cout)
        self.norm2 = nn.GroupNorm(group_count(cout), cout)
        self.skip = nn.Identity() if cin == cout else nn.Conv3d(cin, cout, 1)

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.silu(h + self.skip(x))


class FiLM(nn.Module):
    """``F * (1 + s(delta)) + b(delta)`` with an MLP 1 -> hidden -> 2C.

    The last layer starts at zero so the block is the identity at init.
    """

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, 2 * channels)
        reset_parameters(self)
        nn.init.zeros_(self.fc2.weight)

    def forward(self, feat, delta):
        check_channels(feat, self.channels, "FiLM")
        d = delta_tensor(delta, feat.shape[0], feat)
        scale, shift = self.fc2(F.relu(self.fc1(d[:, None]))).chunk(2, dim=1)
        view = (*scale.shape, 1, 1, 1)
        return feat * (1 + scale.view(view)) + shift.view(view)


class SkipPrompt(nn.Module):
    """Everything attached to one skip connection, for one mode."""

    def __init__(self, channels: int, mode: str, cfg: PromptConfig):
        super().__init__()
        self.mode = mode
        if mode in ("dual", "gpd"):
            self.gpd = GPDPrompt(channels, cfg.n_components, cfg.base_size)
        if mode in ("dual", "clp"):
            self.clp = CLPPrompt(cfg.clp_dim, cfg.clp_hidden)
        if mode == "dual":
            self.fusion = PromptFusion(channels, cfg.clp_dim)
        if mode == "clp":
            self.clp_proj = CLPBroadcast(channels, cfg.clp_dim)
        if mode in ("dual", "gpd", "clp"):
            self.inject = PromptInjection(channels, cfg.heads, cfg.expansion, cfg.n_blocks)
        if mode == "film":
            self.film = FiLM(channels, cfg.film_hidden)

    def prompt(self, feat, delta):
        if self.mode == "gpd":
            return self.gpd(feat)[0]
        p_c = self.clp(delta)
        if self.mode == "clp":
            return self.clp_proj(p_c, feat)
        return self.fusion(self.gpd(feat)[0], p_c)

    def forward(self, feat, delta):
        if self.mode == "none":
            return feat
        if self.mode == "film":
            return self.film(feat, delta)
        return self.inject(feat, self.prompt(feat, delta))


class PromptUNet(nn.Module):
    """Residual conv U-Net; prompt blocks transform encoder skips before the merge.

    The network predicts a correction added to its input; the head starts at
    zero, so an untrained model is the identity map.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        S = config.levels
        ch = config.channels
        self.stem = conv3d(config.in_channels, ch(0))
        self.encoders = nn.ModuleList([ConvBlock(ch(l), ch(l)) for l in range(S)])
        self.downs = nn.ModuleList([conv3d(ch(l), ch(l + 1), 3, stride=2) for l in range(S)])
        self.bottleneck = ConvBlock(ch(S), ch(S))
        self.ups = nn.ModuleList([nn.Conv3d(ch(l + 1), ch(l), 1) for l in range(S)])
        self.decoders = nn.ModuleList([ConvBlock(2 * ch(l), ch(l)) for l in range(S)])
        self.skips = nn.ModuleList([SkipPrompt(ch(l), config.mode, config.prompt) for l in range(S)])
        self.head = nn.Conv3d(ch(0), config.out_channels, 1)
        for name, m in self.named_children():
            if name != "skips":
                reset_parameters(m)
        # start from the identity map
        nn.init.zeros_(self.head.weight)

    @property
    def needs_delta(self) -> bool:
        return self.config.mode in DELTA_MODES

    def check_input(self, x):
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (B, {self.config.in_channels}, H, W, D) input, got {tuple(x.shape)}")
        m = 2**self.config.levels
        if any(n % m for n in x.shape[2:]):
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {m}")

    def forward(self, x, delta=None):
        self.check_input(x)
        if self.needs_delta:
            if delta is None:
                raise ValueError(f"mode {self.config.mode!r} needs a count level")
            delta = delta_tensor(delta, x.shape[0], x)
        else:
            # never touched in unconditioned modes
            delta = None

        h = self.stem(x)
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            h = enc(h)
            skips.append(h)
            h = down(h)
        h = self.bottleneck(h)
        for l in reversed(range(self.config.levels)):
            skip = self.skips[l](skips[l], delta)
            h = F.interpolate(h, size=skip.shape[2:], mode="trilinear", align_corners=False)
            h = self.decoders[l](torch.cat([self.ups[l](h), skip], dim=1))
        return x + self.head(h)


def parameter_group(name: str) -> str:
    """Group key of a parameter name, e.g. ``skips.0.gpd.components`` -> ``skips.0.gpd``."""
    parts = name.split(".")
    depth = 3 if parts[0] == "skips" else (2 if len(parts) > 2 and parts[1].isdigit() else 1)
    return ".".join(parts[:depth])


def count_parameters(model: nn.Module) -> dict[str, int]:
    """Exact number of scalar parameters per group, groups in definition order."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        g = parameter_group(name)
        counts[g] = counts.get(g, 0) + p.numel()
    return counts
