#!/usr/bin/env python3
"""
Visual-grounded Generation Decoder

Causal self-attention, cross-attention to the visual memory and FFN per block,
followed by a linear LM head. Generation seeds the sequence with [DEC] plus the
tokenized prefix prompt and extends it greedily or with a width-B beam until
[EOS] or ``max_len``.

Question answering reuses the same decoder: the question is fused by the
alignment decoder and the generation decoder cross-attends to the
concatenation of visual tokens and fused question tokens.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Union

import torch
import torch.nn as nn

from alignment_decoder import AlignmentDecoder, as_memory
from errors import ArgumentError
from layers import CrossMemory, DecoderBlock
from text_encoder import TextEmbedding, TokenSequence, Vocabulary
from visual_encoder import EncodedVisual

logger = logging.getLogger(__name__)

STRATEGIES = ("greedy", "beam")


@dataclass
class GenerationConfig:
    """
    Decoding settings.

    ``max_len`` bounds the whole decoder sequence, [DEC] and prefix included.
    """
    max_len: int = 20
    strategy: str = "greedy"
    width: int = 1
    prefix: str = ""

    def validate(self):
        if self.max_len < 1:
            raise ArgumentError(f"max_len must be at least 1, got {self.max_len}")
        if self.strategy not in STRATEGIES:
            raise ArgumentError(f"unknown strategy '{self.strategy}', expected one of {', '.join(STRATEGIES)}")
        if self.width < 1:
            raise ArgumentError(f"beam width must be at least 1, got {self.width}")


@dataclass
class GenerationResult:
    text: str
    ids: List[int] = field(default_factory=list)
    truncated: bool = False
    score: float = 0.0


class GenerationDecoder(nn.Module):
    """Causal decoder stack plus LM head."""

    def __init__(self, vocab_size: int, dim: int = 64, heads: int = 4, depth: int = 4,
                 mlp_ratio: float = 4.0, max_len: int = 32):
        super().__init__()
        self.max_len = max_len
        self.embed = TextEmbedding(vocab_size, dim, max_len)
        self.blocks = nn.ModuleList(
            [DecoderBlock(dim, heads, mlp_ratio, causal=True) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(dim)
        self.lm_head = nn.Linear(dim, vocab_size)

    def decode_logits(self, text: TokenSequence,
                      visual: Union[EncodedVisual, CrossMemory]) -> torch.Tensor:
        """Vocabulary logits [B, L, |V|] for a [DEC]-led sequence."""
        memory = as_memory(visual)
        if memory.batch_size != text.batch_size:
            raise ArgumentError(f"batch mismatch: text has {text.batch_size} rows, "
                                f"visual has {memory.batch_size}")
        x = self.embed(text.ids)
        for block in self.blocks:
            x = block(x, key_mask=text.mask, memory=memory.tokens, memory_mask=memory.mask)
        return self.lm_head(self.norm(x))

    def _next_log_probs(self, ids: torch.Tensor, memory: CrossMemory) -> torch.Tensor:
        seq = TokenSequence(ids, torch.ones_like(ids))
        return self.decode_logits(seq, memory)[:, -1].log_softmax(dim=-1)

    @torch.no_grad()
    def generate(self, visual: Union[EncodedVisual, CrossMemory], vocab: Vocabulary,
                 cfg: Optional[GenerationConfig] = None) -> List[GenerationResult]:
        """One result per batch row. Text excludes special tokens and includes the prefix."""
        cfg = cfg or GenerationConfig()
        cfg.validate()
        if cfg.max_len > self.max_len:
            raise ArgumentError(f"max_len {cfg.max_len} exceeds decoder length {self.max_len}")

        memory = as_memory(visual)
        seed = ([vocab.dec_id] + vocab.word_ids(cfg.prefix))[:cfg.max_len]
        if cfg.strategy == "beam":
            return [self._beam(memory.index_select(torch.tensor([row])), seed, vocab, cfg)
                    for row in range(memory.batch_size)]
        return self._greedy(memory, seed, vocab, cfg)

    def _greedy(self, memory: CrossMemory, seed: List[int], vocab: Vocabulary,
                cfg: GenerationConfig) -> List[GenerationResult]:
        B = memory.batch_size
        device = memory.tokens.device
        ids = torch.tensor([seed] * B, dtype=torch.long, device=device)
        finished = torch.zeros(B, dtype=torch.bool, device=device)
        scores = torch.zeros(B, dtype=torch.float64, device=device)

        while ids.shape[1] < cfg.max_len and not finished.all():
            log_probs = self._next_log_probs(ids, memory)
            best = log_probs.argmax(dim=-1)
            picked = log_probs.gather(1, best[:, None]).squeeze(1)
            scores += torch.where(finished, torch.zeros_like(picked), picked).double()
            best = torch.where(finished, torch.full_like(best, vocab.pad_id), best)
            ids = torch.cat([ids, best[:, None]], dim=1)
            finished |= best == vocab.eos_id

        results = []
        for row in range(B):
            tokens = ids[row, len(seed):].tolist()
            results.append(_finish(seed, tokens, vocab, float(scores[row])))
        return results

    def _beam(self, memory: CrossMemory, seed: List[int], vocab: Vocabulary,
              cfg: GenerationConfig) -> GenerationResult:
        # (ids, score, finished)
        beams = [(list(seed), 0.0, False)]
        while any(not done for _, _, done in beams):
            alive = [b for b in beams if not b[2]]
            if len(alive[0][0]) >= cfg.max_len:
                break
            ids = torch.tensor([b[0] for b in alive], dtype=torch.long, device=memory.tokens.device)
            expanded = CrossMemory(memory.tokens.expand(len(alive), -1, -1),
                                   memory.mask.expand(len(alive), -1))
            log_probs = self._next_log_probs(ids, expanded)
            top_lp, top_ids = log_probs.topk(cfg.width, dim=-1)

            candidates = [b for b in beams if b[2]]
            for row, (seq, score, _) in enumerate(alive):
                for lp, token in zip(top_lp[row].tolist(), top_ids[row].tolist()):
                    candidates.append((seq + [token], score + lp, token == vocab.eos_id))
            # stable sort keeps finished beams ahead of equal-scoring extensions
            beams = sorted(candidates, key=lambda b: -b[1])[:cfg.width]

        seq, score, _ = beams[0]
        return _finish(seed, seq[len(seed):], vocab, score)


def _finish(seed: List[int], tokens: List[int], vocab: Vocabulary, score: float) -> GenerationResult:
    truncated = vocab.eos_id not in tokens
    if not truncated:
        tokens = tokens[:tokens.index(vocab.eos_id)]
    ids = seed[1:] + tokens
    return GenerationResult(text=vocab.decode(ids), ids=ids, truncated=truncated, score=score)


def qa_memory(visual: Union[EncodedVisual, CrossMemory], fused_question) -> CrossMemory:
    """Concatenate visual tokens and fused question tokens into one cross-attention memory."""
    visual = as_memory(visual)
    question = fused_question.memory() if hasattr(fused_question, "memory") else fused_question
    if visual.batch_size != question.batch_size:
        raise ArgumentError(f"batch mismatch: visual has {visual.batch_size} rows, "
                            f"question has {question.batch_size}")
    return CrossMemory(
        tokens=torch.cat([visual.tokens, question.tokens], dim=1),
        mask=torch.cat([visual.mask, question.mask.to(visual.mask.dtype)], dim=1),
    )


def fuse_question(visual: Union[EncodedVisual, CrossMemory], question: TokenSequence,
                  align: AlignmentDecoder, vocab: Vocabulary) -> CrossMemory:
    """Run the question through the alignment decoder and build the QA memory."""
    if (question.mask.sum(dim=1) < 2).any():
        raise ArgumentError("question is empty")
    fused = align.fuse(question.with_first(vocab.enc_id), visual)
    return qa_memory(visual, fused)


@torch.no_grad()
def qa_forward(visual: Union[EncodedVisual, CrossMemory], question: TokenSequence,
               align: AlignmentDecoder, gen: GenerationDecoder, vocab: Vocabulary,
               cfg: Optional[GenerationConfig] = None) -> List[GenerationResult]:
    """Answer questions about visuals by generation. The answer carries no prefix."""
    cfg = cfg or GenerationConfig(max_len=8)
    memory = fuse_question(visual, question, align, vocab)
    return gen.generate(memory, vocab, cfg)


def build_generation_decoder(model_cfg, vocab_size: int) -> GenerationDecoder:
    return GenerationDecoder(
        vocab_size=vocab_size,
        dim=model_cfg.dim,
        heads=model_cfg.heads,
        depth=model_cfg.decoder_depth,
        mlp_ratio=model_cfg.mlp_ratio,
        max_len=model_cfg.max_text_len,
    )
