#!/usr/bin/env python3
"""
Transformer building blocks shared by the encoders and decoders.

All blocks are pre-norm with residuals around each sublayer. Masked attention
scores are filled with the dtype minimum so masked keys get exactly zero weight.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
from einops import rearrange


@dataclass
class CrossMemory:
    """Keys/values for cross-attention: tokens [B, N, D] and mask [B, N] (1 = valid)."""
    tokens: torch.Tensor
    mask: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def index_select(self, index: torch.Tensor) -> "CrossMemory":
        return CrossMemory(self.tokens[index], self.mask[index])


class Attention(nn.Module):
    """Multi-head attention with optional key padding mask, causal mask and cross context."""

    def __init__(self, dim: int, heads: int, zero_out: bool = False):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                key_mask: Optional[torch.Tensor] = None, causal: bool = False) -> torch.Tensor:
        context = x if context is None else context
        q = self.q(x)
        k, v = self.kv(context).chunk(2, dim=-1)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in (q, k, v))

        scores = torch.einsum("bhid,bhjd->bhij", q, k) * self.scale
        fill = torch.finfo(scores.dtype).min
        if key_mask is not None:
            keep = key_mask.bool()[:, None, None, :]
            scores = scores.masked_fill(~keep, fill)
        if causal:
            n_q, n_k = scores.shape[-2:]
            future = torch.ones(n_q, n_k, dtype=torch.bool, device=scores.device).triu(1)
            scores = scores.masked_fill(future, fill)

        attn = scores.softmax(dim=-1)
        out = torch.einsum("bhij,bhjd->bhid", attn, v)
        return self.proj(rearrange(out, "b h n d -> b n (h d)"))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderBlock(nn.Module):
    """Bidirectional self-attention + FFN."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_mask=key_mask)
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """
    Self-attention, cross-attention to a visual memory, then FFN.

    The cross-attention out-projection starts at zero, so a freshly built block
    ignores the memory. Passing ``memory=None`` skips the cross-attention sublayer.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, causal: bool = False):
        super().__init__()
        self.causal = causal
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, zero_out=True)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                memory: Optional[torch.Tensor] = None,
                memory_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.self_attn(self.norm1(x), key_mask=key_mask, causal=self.causal)
        if memory is not None:
            x = x + self.cross_attn(self.norm2(x), context=memory, key_mask=memory_mask)
        return x + self.mlp(self.norm3(x))
