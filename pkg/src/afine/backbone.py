"""Multi-stage feature extractors shared by the fidelity and naturalness terms.

Two backbones are provided:

* ``transformer``: a CLIP-style ViT (B/32 by default).  Every block output is a
  stage; the class token is dropped and the patch tokens are reshaped back to
  their spatial grid.  Positional embeddings are resized with corner-aligned
  bilinear interpolation so any resolution can be scored.
* ``toy``: three stride-2 convolutions (8/16/32 channels) with GELU.  Small
  enough for gradient checks and end-to-end training on a laptop CPU.

Stage 0 of every pyramid is the (center-cropped) raw image in [0, 1].
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError

# CLIP preprocessing constants
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

BACKBONE_KINDS = ("transformer", "toy")


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "transformer"
    fidelity_stage_ids: tuple[int, ...] = (3, 6, 9, 12)
    naturalness_stage_ids: tuple[int, ...] = tuple(range(1, 13))
    patch_size: int = 32
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: int = 4
    base_grid: int = 7
    toy_channels: tuple[int, ...] = (8, 16, 32)
    seed: int = 0

    @classmethod
    def toy(cls, seed: int = 0, channels=(8, 16, 32)) -> "BackboneConfig":
        channels = tuple(int(c) for c in channels)
        n = len(channels)
        return cls(
            kind="toy",
            fidelity_stage_ids=tuple(range(1, n + 1)),
            naturalness_stage_ids=tuple(range(1, n + 1)),
            patch_size=2**n,
            embed_dim=max(channels),
            depth=n,
            toy_channels=channels,
            seed=seed,
        )

    @classmethod
    def vit_b32(cls, seed: int = 0) -> "BackboneConfig":
        return cls(seed=seed)

    @property
    def num_stages(self) -> int:
        return len(self.toy_channels) if self.kind == "toy" else self.depth

    def stage_channels(self, stage: int) -> int:
        if stage == 0:
            return 3
        if not 1 <= stage <= self.num_stages:
            raise ConfigError(f"unknown stage id {stage} (backbone has stages 1..{self.num_stages})")
        if self.kind == "toy":
            return self.toy_channels[stage - 1]
        return self.embed_dim

    @property
    def pyramid_stage_ids(self) -> tuple[int, ...]:
        """Stages the extractor must materialize, stage 0 included."""
        return (0,) + tuple(sorted(set(self.fidelity_stage_ids) | set(self.naturalness_stage_ids)))

    def validate(self) -> "BackboneConfig":
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"backbone kind must be one of {BACKBONE_KINDS}, got {self.kind!r}")
        for name in ("fidelity_stage_ids", "naturalness_stage_ids"):
            ids = getattr(self, name)
            if not ids:
                raise ConfigError(f"{name} must not be empty")
            if any(b <= a for a, b in zip(ids, ids[1:])):
                raise ConfigError(f"{name} must be strictly increasing, got {list(ids)}")
            for i in ids:
                self.stage_channels(i)
            if ids[0] < 1:
                raise ConfigError(f"{name} lists stage {ids[0]}; stage 0 is implicit")
        if self.patch_size < 1 or self.embed_dim < 1:
            raise ConfigError("patch_size and embed_dim must be positive")
        if self.kind == "toy" and self.patch_size % 2 ** len(self.toy_channels):
            raise ConfigError("toy patch_size must be a multiple of 2**num_stages")
        if self.kind == "transformer" and self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class FeaturePyramid:
    """Stage index -> feature maps of shape (B, C, h, w). Stage 0 is the raw image."""

    stages: dict[int, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, stage: int) -> torch.Tensor:
        return self.stages[stage]

    @property
    def image(self) -> torch.Tensor:
        return self.stages[0]

    def select(self, index) -> "FeaturePyramid":
        return FeaturePyramid({i: t[index] for i, t in self.stages.items()})


def stage_statistics(stage_x: torch.Tensor, stage_y: torch.Tensor):
    """Per-channel global mean, variance and cross-covariance of two stages.

    Inputs are (..., C, h, w); outputs are five (..., C) tensors
    ``(mu_x, mu_y, var_x, var_y, cov_xy)``.  Variances use the population
    convention (divide by h*w).
    """
    if stage_x.shape != stage_y.shape:
        raise DimensionError(f"stage shapes differ: {tuple(stage_x.shape)} vs {tuple(stage_y.shape)}")
    if stage_x.dim() < 3 or stage_x.shape[-1] * stage_x.shape[-2] == 0:
        raise DimensionError(f"expected (..., C, h, w) with a non-empty grid, got {tuple(stage_x.shape)}")
    x = stage_x.flatten(-2)
    y = stage_y.flatten(-2)
    mu_x = x.mean(-1)
    mu_y = y.mean(-1)
    dx = x - mu_x.unsqueeze(-1)
    dy = y - mu_y.unsqueeze(-1)
    var_x = (dx * dx).mean(-1)
    var_y = (dy * dy).mean(-1)
    cov_xy = (dx * dy).mean(-1)
    return mu_x, mu_y, var_x, var_y, cov_xy


def interpolate_positional_grid(grid: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Resize an (h, w, D) grid of embedding vectors with corner-aligned bilinear interpolation."""
    if grid.dim() != 3:
        raise DimensionError(f"expected an (h, w, D) grid, got shape {tuple(grid.shape)}")
    h, w, _ = grid.shape
    if h < 2 or w < 2:
        raise DimensionError(f"source grid must be at least 2x2, got {h}x{w}")
    if target_h < 1 or target_w < 1:
        raise DimensionError(f"target grid must be at least 1x1, got {target_h}x{target_w}")
    if (target_h, target_w) == (h, w):
        return grid
    out = F.interpolate(
        grid.permute(2, 0, 1).unsqueeze(0),
        size=(target_h, target_w),
        mode="bilinear",
        align_corners=True,
    )
    return out.squeeze(0).permute(1, 2, 0)


def center_crop_to_multiple(images: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = images.shape[-2:]
    if h < multiple or w < multiple:
        raise DimensionError(f"image {h}x{w} is smaller than one {multiple}x{multiple} patch")
    nh, nw = h - h % multiple, w - w % multiple
    top, left = (h - nh) // 2, (w - nw) // 2
    return images[..., top : top + nh, left : left + nw]


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.num_heads

        def heads(t):
            return t.view(b, n, h, d // h).transpose(1, 2)

        q, k, v = heads(self.q_proj(x) * self.scale), heads(self.k_proj(x)), heads(self.v_proj(x))
        attn = torch.softmax(q @ k.transpose(-2, -1), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = QuickGELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.layer_norm1 = nn.LayerNorm(dim, eps=1e-5)
        self.self_attn = Attention(dim, num_heads)
        self.layer_norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def forward(self, x):
        x = x + self.self_attn(self.layer_norm1(x))
        return x + self.mlp(self.layer_norm2(x))


class Backbone(nn.Module):
    """Base class: subclasses implement ``_stages`` on normalized, cropped input."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config.validate()

    def extract(self, images: torch.Tensor) -> FeaturePyramid:
        """Return the feature pyramid of a (B, 3, H, W) batch in [0, 1]."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, H, W) images, got shape {tuple(images.shape)}")
        images = center_crop_to_multiple(images, self.config.patch_size)
        wanted = self.config.pyramid_stage_ids
        feats = self._stages(images, max(wanted))
        stages = {0: images}
        for i in wanted[1:]:
            stages[i] = feats[i - 1]
        return FeaturePyramid(stages)

    def forward(self, images):
        return self.extract(images)

    def _stages(self, images: torch.Tensor, last: int) -> list[torch.Tensor]:
        raise NotImplementedError


class ToyConvBackbone(Backbone):
    def __init__(self, config: BackboneConfig):
        super().__init__(config)
        chans = (3,) + tuple(config.toy_channels)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.convs = nn.ModuleList(
                nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1) for cin, cout in zip(chans, chans[1:])
            )

    def _stages(self, images, last):
        out = []
        h = images
        for conv in self.convs[:last]:
            h = F.gelu(conv(h))
            out.append(h)
        return out


class VisionTransformerBackbone(Backbone):
    """CLIP-style ViT. Parameter names follow the Hugging Face CLIP vision tower."""

    def __init__(self, config: BackboneConfig):
        super().__init__(config)
        d, p, g = config.embed_dim, config.patch_size, config.base_grid
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.patch_embedding = nn.Conv2d(3, d, kernel_size=p, stride=p, bias=False)
            self.class_embedding = nn.Parameter(torch.randn(d) * d**-0.5)
            self.position_embedding = nn.Parameter(torch.randn(g * g + 1, d) * 0.02)
            self.pre_layrnorm = nn.LayerNorm(d, eps=1e-5)
            self.layers = nn.ModuleList(
                EncoderLayer(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
            )
        self.register_buffer("pixel_mean", torch.tensor(CLIP_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(CLIP_STD).view(1, 3, 1, 1), persistent=False)

    def position_embeddings_for(self, gh: int, gw: int) -> torch.Tensor:
        g = self.config.base_grid
        cls_pos, grid = self.position_embedding[:1], self.position_embedding[1:]
        grid = interpolate_positional_grid(grid.view(g, g, -1), gh, gw)
        return torch.cat([cls_pos, grid.reshape(gh * gw, -1)], dim=0)

    def _stages(self, images, last):
        x = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        x = self.patch_embedding(x)
        b, d, gh, gw = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(b, 1, d)
        tokens = torch.cat([cls, tokens], dim=1) + self.position_embeddings_for(gh, gw)
        tokens = self.pre_layrnorm(tokens)
        out = []
        for layer in self.layers[:last]:
            tokens = layer(tokens)
            out.append(tokens[:, 1:].transpose(1, 2).reshape(b, d, gh, gw))
        return out


def build_backbone(config: BackboneConfig) -> Backbone:
    config.validate()
    if config.kind == "toy":
        return ToyConvBackbone(config)
    return VisionTransformerBackbone(config)


def extract_pyramid(images: torch.Tensor, backbone: Backbone) -> FeaturePyramid:
    return backbone.extract(images)


def convert_hf_clip_vision_state_dict(state: dict, config: BackboneConfig) -> dict:
    """Map a Hugging Face ``CLIPVisionModel`` state dict onto VisionTransformerBackbone names.

    The post layer norm and projection heads are dropped; they do not feed any stage.
    """
    out = {}
    for key, value in state.items():
        k = key
        for prefix in ("vision_model.", "embeddings.", "encoder."):
            if k.startswith(prefix):
                k = k[len(prefix) :]
        if k.startswith(("post_layernorm", "position_ids")) or "projection" in k:
            continue
        if k == "position_embedding.weight":
            k = "position_embedding"
        layer_idx = k.split(".")[1] if k.startswith("layers.") else None
        if layer_idx is not None and int(layer_idx) >= config.depth:
            continue
        out[k] = value
    expected = config.base_grid**2 + 1
    if out["position_embedding"].shape[0] != expected:
        raise DimensionError(
            f"checkpoint has {out['position_embedding'].shape[0]} positions, config expects {expected}"
        )
    return out


def grid_size(h: int, w: int, patch: int) -> tuple[int, int]:
    return math.floor(h / patch), math.floor(w / patch)
