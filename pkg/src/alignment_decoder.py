#!/usr/bin/env python3
"""
Visual-grounded Alignment Decoder

Bidirectional self-attention over the text, cross-attention from text queries to
every visual token (CLS included), then FFN, in every block. The output at
position 0, where [ENC] replaces [CLS], is the fused cross-modal representation
fed to the two-way VLM head.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn

from errors import ArgumentError
from layers import CrossMemory, DecoderBlock
from text_encoder import TextEmbedding, TokenSequence
from visual_encoder import EncodedVisual

logger = logging.getLogger(__name__)

MATCHED = 0


@dataclass
class FusedRepresentation:
    tokens: torch.Tensor
    enc_vec: torch.Tensor
    mask: torch.Tensor

    def memory(self) -> CrossMemory:
        return CrossMemory(self.tokens, self.mask)


@dataclass
class VlmPrediction:
    """Two-way logits and p_vlm, the probability that the pair is matched."""
    logits: torch.Tensor
    p_vlm: torch.Tensor
    y_vlm: Optional[torch.Tensor] = None


def as_memory(visual: Union[EncodedVisual, CrossMemory]) -> CrossMemory:
    if isinstance(visual, EncodedVisual):
        return visual.memory()
    return visual


def vlm_from_logits(logits: torch.Tensor) -> VlmPrediction:
    """Softmax over (matched, unmatched) logits."""
    probs = logits.softmax(dim=-1)
    return VlmPrediction(logits=logits, p_vlm=probs[:, MATCHED])


class AlignmentDecoder(nn.Module):
    """Fusion stack plus the linear VLM head."""

    def __init__(self, vocab_size: int, dim: int = 64, heads: int = 4, depth: int = 4,
                 mlp_ratio: float = 4.0, max_len: int = 32):
        super().__init__()
        self.embed = TextEmbedding(vocab_size, dim, max_len)
        self.blocks = nn.ModuleList(
            [DecoderBlock(dim, heads, mlp_ratio, causal=False) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(dim)
        self.match_head = nn.Linear(dim, 2)

    def fuse(self, text: TokenSequence,
             visual: Optional[Union[EncodedVisual, CrossMemory]]) -> FusedRepresentation:
        """
        Fuse text (with [ENC] at position 0) with visual tokens.

        ``visual=None`` runs the text-only self-attention stack.
        """
        memory = as_memory(visual) if visual is not None else None
        if memory is not None and memory.batch_size != text.batch_size:
            raise ArgumentError(f"batch mismatch: text has {text.batch_size} rows, "
                                f"visual has {memory.batch_size}")

        x = self.embed(text.ids)
        for block in self.blocks:
            if memory is None:
                x = block(x, key_mask=text.mask)
            else:
                x = block(x, key_mask=text.mask, memory=memory.tokens, memory_mask=memory.mask)
        x = self.norm(x)
        return FusedRepresentation(tokens=x, enc_vec=x[:, 0], mask=text.mask)

    def vlm_head(self, fused: FusedRepresentation) -> VlmPrediction:
        return vlm_from_logits(self.match_head(fused.enc_vec))

    def cross_attention_projections(self):
        return [block.cross_attn.proj for block in self.blocks]


def build_alignment_decoder(model_cfg, vocab_size: int) -> AlignmentDecoder:
    return AlignmentDecoder(
        vocab_size=vocab_size,
        dim=model_cfg.dim,
        heads=model_cfg.heads,
        depth=model_cfg.decoder_depth,
        mlp_ratio=model_cfg.mlp_ratio,
        max_len=model_cfg.max_text_len,
    )
