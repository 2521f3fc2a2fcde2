#!/usr/bin/env python3
"""
Unified Visual Encoder

One transformer for images and videos. Images (T=1) go through a 2D patch
tokenizer, videos through a 3D tubelet tokenizer; spatial and temporal position
encodings are added to both. Each block runs temporal self-attention (tokens at
the same spatial index attending across time) and then spatial self-attention
(tokens of one frame attending to each other). Temporal sublayers are skipped
whenever there is a single temporal position.

The [CLS] token is excluded from temporal attention, replicated per temporal
position for spatial attention and averaged back over the replicas before the FFN.
"""

import logging
from dataclasses import dataclass
from typing import List, Set

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange, repeat

from errors import ArgumentError, NumericError, ShapeError
from layers import Attention, CrossMemory, FeedForward

logger = logging.getLogger(__name__)

# Parameter name fragments that only video inputs reach.
VIDEO_ONLY_PARAMS = ("temporal_attn", "temporal_norm", "patch_embed_3d")


@dataclass
class VisualBatch:
    """Batch of frame stacks [B, T, H, W, C]. T=1 encodes an image."""
    frames: torch.Tensor
    patch_size: int = 16
    tubelet: int = 1

    @property
    def T(self) -> int:
        return self.frames.shape[1]

    @property
    def is_image(self) -> bool:
        return self.T == 1

    def validate(self):
        if self.frames.ndim != 5:
            raise ShapeError("frames", f"expected [B, T, H, W, C], got {tuple(self.frames.shape)}")
        _, T, H, W, _ = self.frames.shape
        if T < 1:
            raise ShapeError("T", "frame count must be at least 1")
        if H % self.patch_size != 0:
            raise ShapeError("H", f"height {H} is not divisible by patch size {self.patch_size}")
        if W % self.patch_size != 0:
            raise ShapeError("W", f"width {W} is not divisible by patch size {self.patch_size}")
        if T > 1 and T % self.tubelet != 0:
            raise ShapeError("T", f"frame count {T} is not divisible by tubelet depth {self.tubelet}")
        if not torch.isfinite(self.frames).all():
            raise ArgumentError("frames contain non-finite values")


@dataclass
class EncodedVisual:
    """Per-token features [B, 1 + T'S, D] with CLS first, and the pooled v_cls [B, D]."""
    tokens: torch.Tensor
    v_cls: torch.Tensor
    temporal_positions: int = 1

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def memory(self) -> CrossMemory:
        """Cross-attention memory: all tokens including CLS, every key valid."""
        mask = torch.ones(self.tokens.shape[:2], dtype=torch.long, device=self.tokens.device)
        return CrossMemory(self.tokens, mask)

    def index_select(self, index: torch.Tensor) -> "EncodedVisual":
        return EncodedVisual(self.tokens[index], self.v_cls[index], self.temporal_positions)


def interpolate_temporal_pos(pe: torch.Tensor, T_new: int) -> torch.Tensor:
    """
    Resample a temporal position table [T_old, D] to [T_new, D].

    Linear interpolation with aligned end points, so the first and last rows
    are preserved. T_new == T_old returns ``pe`` unchanged.
    """
    if pe.ndim != 2 or pe.shape[0] < 1:
        raise ArgumentError(f"temporal table must be [T_old >= 1, D], got {tuple(pe.shape)}")
    if T_new < 1:
        raise ArgumentError(f"T_new must be at least 1, got {T_new}")
    if T_new == pe.shape[0]:
        return pe
    resized = F.interpolate(pe.t().unsqueeze(0), size=T_new, mode="linear", align_corners=True)
    return resized.squeeze(0).t()


class SpaceTimeBlock(nn.Module):
    """Divided space-time attention block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, temporal: bool = True):
        super().__init__()
        if temporal:
            self.temporal_norm = nn.LayerNorm(dim)
            # zero out-projection: the video path equals the image path at init
            self.temporal_attn = Attention(dim, heads, zero_out=True)
        else:
            self.temporal_norm = None
            self.temporal_attn = None
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, frames: int) -> torch.Tensor:
        B = x.shape[0]
        cls, patches = x[:, :1], x[:, 1:]

        if frames > 1 and self.temporal_attn is not None:
            t = rearrange(patches, "b (t s) d -> (b s) t d", t=frames)
            t = t + self.temporal_attn(self.temporal_norm(t))
            patches = rearrange(t, "(b s) t d -> b (t s) d", b=B)

        space = rearrange(patches, "b (t s) d -> (b t) s d", t=frames)
        space = torch.cat([repeat(cls, "b 1 d -> (b t) 1 d", t=frames), space], dim=1)
        space = space + self.attn(self.norm1(space))

        cls = rearrange(space[:, :1], "(b t) 1 d -> b t d", b=B).mean(dim=1, keepdim=True)
        patches = rearrange(space[:, 1:], "(b t) s d -> b (t s) d", b=B)
        x = torch.cat([cls, patches], dim=1)
        return x + self.mlp(self.norm2(x))


class VisualEncoder(nn.Module):
    """
    Unified image/video encoder.

    Args:
        image_size: input height and width in pixels
        patch_size: spatial patch size
        channels: input channels
        dim: token width
        heads: attention heads
        depth: number of space-time blocks
        mlp_ratio: FFN hidden ratio
        max_frames: rows of the temporal position table
        tubelet: frames per 3D patch
        temporal: build temporal sublayers and the 3D tokenizer
    """

    def __init__(self, image_size: int = 32, patch_size: int = 16, channels: int = 3,
                 dim: int = 64, heads: int = 4, depth: int = 4, mlp_ratio: float = 4.0,
                 max_frames: int = 8, tubelet: int = 1, temporal: bool = True):
        super().__init__()
        if image_size % patch_size != 0:
            raise ArgumentError(f"image_size {image_size} is not divisible by patch_size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.tubelet = tubelet
        self.dim = dim
        self.num_spatial = (image_size // patch_size) ** 2

        self.patch_embed_2d = nn.Conv2d(channels, dim, kernel_size=patch_size, stride=patch_size)
        if temporal:
            self.patch_embed_3d = nn.Conv3d(channels, dim, kernel_size=(tubelet, patch_size, patch_size),
                                            stride=(tubelet, patch_size, patch_size))
            if tubelet == 1:
                # frame-wise tubelets start as the 2D tokenizer
                with torch.no_grad():
                    self.patch_embed_3d.weight.copy_(self.patch_embed_2d.weight.unsqueeze(2))
                    self.patch_embed_3d.bias.copy_(self.patch_embed_2d.bias)
        else:
            self.patch_embed_3d = None

        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_spatial, dim))
        self.time_embed = nn.Parameter(torch.zeros(max_frames, dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

        self.blocks = nn.ModuleList(
            [SpaceTimeBlock(dim, heads, mlp_ratio, temporal=temporal) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(dim)

    def _check(self, batch: VisualBatch):
        batch.validate()
        _, T, H, W, C = batch.frames.shape
        if H != self.image_size:
            raise ShapeError("H", f"expected height {self.image_size}, got {H}")
        if W != self.image_size:
            raise ShapeError("W", f"expected width {self.image_size}, got {W}")
        if C != self.patch_embed_2d.in_channels:
            raise ShapeError("C", f"expected {self.patch_embed_2d.in_channels} channels, got {C}")
        if T > 1 and self.patch_embed_3d is None:
            raise ShapeError("T", "encoder was built without temporal sublayers")

    def temporal_table(self, positions: int) -> torch.Tensor:
        if positions == 1:
            return self.time_embed[:1]
        return interpolate_temporal_pos(self.time_embed, positions)

    def tokenize(self, batch: VisualBatch) -> torch.Tensor:
        """Patch tokens with position encodings, [B, T'·S, D] (no CLS)."""
        self._check(batch)
        frames = batch.frames
        if batch.is_image:
            x = self.patch_embed_2d(rearrange(frames[:, 0], "b h w c -> b c h w"))
            x = rearrange(x, "b d h w -> b 1 (h w) d")
        else:
            x = self.patch_embed_3d(rearrange(frames, "b t h w c -> b c t h w"))
            x = rearrange(x, "b d t h w -> b t (h w) d")

        positions = x.shape[1]
        x = x + self.pos_embed[:, None] + self.temporal_table(positions)[None, :, None, :]
        return rearrange(x, "b t s d -> b (t s) d")

    def encode(self, batch: VisualBatch) -> EncodedVisual:
        tokens = self.tokenize(batch)
        B = tokens.shape[0]
        positions = tokens.shape[1] // self.num_spatial

        x = torch.cat([self.cls_token.expand(B, -1, -1), tokens], dim=1)
        for index, block in enumerate(self.blocks):
            x = block(x, positions)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after visual block {index}")

        x = self.norm(x)
        return EncodedVisual(tokens=x, v_cls=x[:, 0], temporal_positions=positions)

    def forward(self, frames: torch.Tensor) -> EncodedVisual:
        return self.encode(VisualBatch(frames, self.patch_size, self.tubelet))

    def set_num_frames(self, frames: int):
        """Resample the temporal position table for a new clip length."""
        with torch.no_grad():
            table = interpolate_temporal_pos(self.time_embed.data, frames).clone()
        self.time_embed = nn.Parameter(table)
        logger.info(f"Temporal position table resized to {frames} rows")

    def video_only_parameter_names(self) -> Set[str]:
        return {name for name, _ in self.named_parameters()
                if any(fragment in name for fragment in VIDEO_ONLY_PARAMS)}

    def shared_parameter_names(self) -> List[str]:
        video_only = self.video_only_parameter_names()
        return [name for name, _ in self.named_parameters() if name not in video_only]


def build_visual_encoder(model_cfg, temporal: bool = True) -> VisualEncoder:
    """Build the encoder from a ModelConfig."""
    return VisualEncoder(
        image_size=model_cfg.image_size,
        patch_size=model_cfg.patch_size,
        channels=model_cfg.channels,
        dim=model_cfg.dim,
        heads=model_cfg.heads,
        depth=model_cfg.depth,
        mlp_ratio=model_cfg.mlp_ratio,
        max_frames=model_cfg.max_frames,
        tubelet=model_cfg.tubelet,
        temporal=temporal,
    )
