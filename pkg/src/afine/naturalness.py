"""No-reference naturalness head on top of stage-pooled backbone statistics."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid
from .errors import ConfigError, DimensionError

PROJ_DIM = 128
HIDDEN_MULT = 6


def pool_stage(stage: torch.Tensor) -> torch.Tensor:
    """Global mean and population-variance pooling: (..., C, h, w) -> (..., 2C), means first."""
    if stage.dim() < 3 or stage.shape[-1] * stage.shape[-2] == 0:
        raise DimensionError(f"cannot pool stage of shape {tuple(stage.shape)}")
    flat = stage.flatten(-2)
    mean = flat.mean(-1)
    var = ((flat - mean.unsqueeze(-1)) ** 2).mean(-1)
    return torch.cat([mean, var], dim=-1)


def _pad_pooled(pooled: torch.Tensor, channels: int, width: int) -> torch.Tensor:
    # the toy backbone has stages narrower than embed_dim; zero-fill means and variances separately
    if channels == width:
        return pooled
    mean, var = pooled[..., :channels], pooled[..., channels:]
    pad = (0, width - channels)
    return torch.cat([F.pad(mean, pad), F.pad(var, pad)], dim=-1)


class NaturalnessHead(nn.Module):
    """Shared per-stage projection (2*embed_dim -> 128) followed by a two-layer GELU MLP.

    MLP widths follow ``6 + 128*S -> 128*6 -> 1`` for S naturalness stages.
    """

    def __init__(self, stage_channels, embed_dim: int, seed: int = 0, proj_dim: int = PROJ_DIM):
        super().__init__()
        self.stage_channels = tuple((int(s), int(c)) for s, c in stage_channels)
        self.embed_dim = int(embed_dim)
        if any(c > self.embed_dim for _, c in self.stage_channels):
            raise ConfigError("stage wider than embed_dim")
        n_stages = len(self.stage_channels)
        self.in_features = 3 * 2 + proj_dim * n_stages
        self.hidden_features = proj_dim * HIDDEN_MULT
        self.projection = nn.Linear(2 * self.embed_dim, proj_dim)
        self.mlp_hidden = nn.Linear(self.in_features, self.hidden_features)
        self.mlp_out = nn.Linear(self.hidden_features, 1)
        gen = torch.Generator().manual_seed(seed)
        for layer in (self.projection, self.mlp_hidden, self.mlp_out):
            bound = 1.0 / math.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen) * 2 * bound - bound)
                layer.bias.zero_()

    @property
    def stage_ids(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.stage_channels)

    def features(self, image: torch.Tensor, pyr: FeaturePyramid) -> torch.Tensor:
        """Concatenate the 6 RGB statistics with the projected stage vectors -> (B, 6 + 128*S)."""
        missing = [s for s in self.stage_ids if s not in pyr.stages]
        if missing:
            raise ConfigError(f"pyramid lacks naturalness stages {missing}")
        parts = [pool_stage(image)]
        for stage, channels in self.stage_channels:
            fmap = pyr[stage]
            if fmap.shape[-3] != channels:
                raise ConfigError(f"stage {stage} has {fmap.shape[-3]} channels, head expects {channels}")
            parts.append(self.projection(_pad_pooled(pool_stage(fmap), channels, self.embed_dim)))
        return torch.cat(parts, dim=-1)

    def forward(self, image: torch.Tensor, pyr: FeaturePyramid) -> torch.Tensor:
        h = self.features(image, pyr)
        return self.mlp_out(F.gelu(self.mlp_hidden(h))).squeeze(-1)


def naturalness_score(image: torch.Tensor, pyr: FeaturePyramid, head: NaturalnessHead) -> torch.Tensor:
    """Raw (uncalibrated) naturalness; lower means more natural. Shape (B,)."""
    return head(image, pyr)
