#!/usr/bin/env python3
"""
Text Encoder Module

Closed-vocabulary tokenizer (lowercase, whitespace split) and the bidirectional
transformer text encoder. The [CLS] output at position 0 is the pooled
text representation w_cls.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import torch
import torch.nn as nn

from errors import ArgumentError, ConfigError, ShapeError
from layers import EncoderBlock

logger = logging.getLogger(__name__)

PAD, CLS, ENC, DEC, EOS, UNK = "[PAD]", "[CLS]", "[ENC]", "[DEC]", "[EOS]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, ENC, DEC, EOS, UNK)


def split_words(text: str) -> List[str]:
    return text.lower().split()


class Vocabulary:
    """
    Token ↔ id map. Serialized as a text file, one token per line, line number = id.
    """

    def __init__(self, tokens: Sequence[str]):
        if not tokens:
            raise ConfigError("vocabulary is empty")
        seen = set()
        for token in tokens:
            if token in seen:
                raise ConfigError(f"duplicate vocabulary token '{token}'")
            seen.add(token)
        missing = [t for t in SPECIAL_TOKENS if t not in seen]
        if missing:
            raise ConfigError(f"vocabulary lacks special tokens: {', '.join(missing)}")

        self.tokens: List[str] = list(tokens)
        self.index = {token: i for i, token in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        """Special tokens first, then every word of ``texts`` in sorted order."""
        words = set()
        for text in texts:
            words.update(split_words(text))
        words.difference_update(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + sorted(words))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for token in self.tokens:
                f.write(token + "\n")
        return path

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def enc_id(self) -> int:
        return self.index[ENC]

    @property
    def dec_id(self) -> int:
        return self.index[DEC]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def special_ids(self) -> set:
        return {self.index[t] for t in SPECIAL_TOKENS}

    def word_ids(self, text: str) -> List[int]:
        return [self.index.get(w, self.unk_id) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        """Detokenize, dropping special tokens."""
        special = self.special_ids
        return " ".join(self.tokens[i] for i in ids if i not in special)


@dataclass
class TokenSequence:
    """ids [B, L] and mask [B, L] (1 = real token). Position 0 holds a special token."""
    ids: torch.Tensor
    mask: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    def with_first(self, token_id: int) -> "TokenSequence":
        """Substitute the position-0 token (e.g. [ENC] or [DEC] for [CLS])."""
        ids = self.ids.clone()
        ids[:, 0] = token_id
        return TokenSequence(ids, self.mask)

    def index_select(self, index: torch.Tensor) -> "TokenSequence":
        return TokenSequence(self.ids[index], self.mask[index])

    def to(self, device) -> "TokenSequence":
        return TokenSequence(self.ids.to(device), self.mask.to(device))


def _token_ids(text: str, vocab: Vocabulary, L: int, add_eos: bool) -> List[int]:
    words = vocab.word_ids(text)
    if add_eos:
        return [vocab.cls_id] + words[:L - 2] + [vocab.eos_id]
    return ([vocab.cls_id] + words)[:L]


def tokenize_text(text: str, vocab: Vocabulary, L: int, add_eos: bool = False) -> TokenSequence:
    """
    Tokenize one string into a [1, L] sequence.

    Prepends [CLS], truncates to L and pads with [PAD]. With ``add_eos`` the
    words are truncated so that [EOS] always closes the sequence.
    """
    return tokenize_batch([text], vocab, L, add_eos=add_eos)


def tokenize_batch(texts: Sequence[str], vocab: Vocabulary, L: int, add_eos: bool = False) -> TokenSequence:
    if vocab is None or len(vocab) == 0:
        raise ConfigError("vocabulary is empty")
    if L < 2:
        raise ArgumentError(f"sequence length must be at least 2, got {L}")

    ids = torch.full((len(texts), L), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((len(texts), L), dtype=torch.long)
    for row, text in enumerate(texts):
        tokens = _token_ids(text, vocab, L, add_eos)
        ids[row, :len(tokens)] = torch.tensor(tokens, dtype=torch.long)
        mask[row, :len(tokens)] = 1
    return TokenSequence(ids, mask)


class TextEmbedding(nn.Module):
    """Word + learned position embeddings."""

    def __init__(self, vocab_size: int, dim: int, max_len: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.word = nn.Embedding(vocab_size, dim)
        self.position = nn.Parameter(torch.zeros(1, max_len, dim))
        nn.init.trunc_normal_(self.word.weight, std=0.02)
        nn.init.trunc_normal_(self.position, std=0.02)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.max_len:
            raise ShapeError("L", f"sequence length {ids.shape[1]} exceeds maximum {self.max_len}")
        bad = (ids < 0) | (ids >= self.vocab_size)
        if bad.any():
            b, l = [int(v) for v in bad.nonzero()[0]]
            raise ArgumentError(f"token id {int(ids[b, l])} out of range [0, {self.vocab_size}) "
                                f"at position (row={b}, col={l})")
        return self.word(ids) + self.position[:, :ids.shape[1]]


class TextEncoder(nn.Module):
    """Bidirectional transformer over token sequences."""

    def __init__(self, vocab_size: int, dim: int = 64, heads: int = 4, depth: int = 4,
                 mlp_ratio: float = 4.0, max_len: int = 32):
        super().__init__()
        self.embed = TextEmbedding(vocab_size, dim, max_len)
        self.blocks = nn.ModuleList([EncoderBlock(dim, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def encode_text(self, seq: TokenSequence) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (tokens [B, L, D], w_cls [B, D])."""
        x = self.embed(seq.ids)
        for block in self.blocks:
            x = block(x, key_mask=seq.mask)
        x = self.norm(x)
        return x, x[:, 0]

    def forward(self, seq: TokenSequence) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.encode_text(seq)


def build_text_encoder(model_cfg, vocab_size: int) -> TextEncoder:
    return TextEncoder(
        vocab_size=vocab_size,
        dim=model_cfg.dim,
        heads=model_cfg.heads,
        depth=model_cfg.text_depth,
        mlp_ratio=model_cfg.mlp_ratio,
        max_len=model_cfg.max_text_len,
    )
