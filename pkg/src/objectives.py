#!/usr/bin/env python3
"""
Pretraining Objectives

UniVLC (label-aware contrastive loss over a momentum memory bank), VLM
(matched/unmatched classification through the alignment decoder) and LM
(teacher-forced captioning through the generation decoder), with the supporting
projection heads, temperature, momentum encoders and bank.
"""

import copy
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ArgumentError
from generation_decoder import fuse_question
from text_encoder import TokenSequence, Vocabulary

logger = logging.getLogger(__name__)

CONTRASTIVE_MODES = ("univlc", "vanilla")


class ProjectionHead(nn.Module):
    """Linear projection followed by L2 normalization."""

    def __init__(self, dim: int, proj_dim: int):
        super().__init__()
        self.linear = nn.Linear(dim, proj_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.linear(x), dim=-1)


class Temperature(nn.Module):
    """Learnable τ stored as the exponent of a free parameter."""

    def __init__(self, tau_init: float = 0.07):
        super().__init__()
        if tau_init <= 0:
            raise ArgumentError(f"temperature must be positive, got {tau_init}")
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def forward(self) -> torch.Tensor:
        return self.tau


class MemoryBank(nn.Module):
    """
    Ring buffer of the M most recent momentum embeddings and their labels.

    Entries are written in order starting at slot 0, so while the bank is not
    yet full the valid entries are exactly slots ``[0, filled)``.
    """

    def __init__(self, size: int, proj_dim: int):
        super().__init__()
        if size < 1:
            raise ArgumentError(f"bank size must be at least 1, got {size}")
        self.size = size
        self.register_buffer("visual_vecs", torch.zeros(size, proj_dim))
        self.register_buffer("text_vecs", torch.zeros(size, proj_dim))
        self.register_buffer("labels", torch.full((size,), -1, dtype=torch.long))
        self.register_buffer("cursor", torch.zeros((), dtype=torch.long))
        self.register_buffer("filled", torch.zeros((), dtype=torch.long))

    @property
    def write_cursor(self) -> int:
        return int(self.cursor)

    @property
    def count(self) -> int:
        return int(self.filled)

    def contents(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        n = self.count
        return self.visual_vecs[:n], self.text_vecs[:n], self.labels[:n]

    def reset(self):
        self.visual_vecs.zero_()
        self.text_vecs.zero_()
        self.labels.fill_(-1)
        self.cursor.zero_()
        self.filled.zero_()


@torch.no_grad()
def enqueue(bank: MemoryBank, v: torch.Tensor, w: torch.Tensor, y: torch.Tensor) -> MemoryBank:
    """Overwrite the oldest entries with a batch of (v, w, y)."""
    B = v.shape[0]
    if B > bank.size:
        raise ArgumentError(f"batch of {B} does not fit a memory bank of size {bank.size}")
    if w.shape[0] != B or y.shape[0] != B:
        raise ArgumentError("v, w and y must have the same batch size")

    slots = (bank.cursor + torch.arange(B, device=bank.cursor.device)) % bank.size
    bank.visual_vecs[slots] = v.detach().to(bank.visual_vecs.dtype)
    bank.text_vecs[slots] = w.detach().to(bank.text_vecs.dtype)
    bank.labels[slots] = y.to(bank.labels.dtype)
    bank.cursor.fill_((bank.write_cursor + B) % bank.size)
    bank.filled.fill_(min(bank.count + B, bank.size))
    return bank


@dataclass
class UniVLCState:
    temperature: Temperature
    bank: MemoryBank
    normalize_positives: bool = True
    mode: str = "univlc"

    def __post_init__(self):
        if self.mode not in CONTRASTIVE_MODES:
            raise ArgumentError(f"unknown contrastive mode '{self.mode}'")

    @property
    def tau(self) -> torch.Tensor:
        return self.temperature.tau


class MomentumState(nn.Module):
    """
    Momentum copies of the visual encoder, text encoder and projection heads.

    The copies never receive gradients; they are moved toward the live
    parameters by ``momentum_step``.
    """

    def __init__(self, live_modules: Dict[str, nn.Module], m: float = 0.995):
        super().__init__()
        if not 0.0 <= m <= 1.0:
            raise ArgumentError(f"momentum coefficient must lie in [0, 1], got {m}")
        self.m = m
        self.encoders = nn.ModuleDict({name: copy.deepcopy(module) for name, module in live_modules.items()})
        self.encoders.requires_grad_(False)

    def named_momentum(self) -> Iterator[Tuple[str, torch.Tensor]]:
        """Parameters named as in the live model (``visual.blocks.0...``)."""
        for name, module in self.encoders.items():
            for sub, param in module.named_parameters(prefix=name):
                yield sub, param

    @torch.no_grad()
    def embed_visual(self, frames: torch.Tensor) -> torch.Tensor:
        encoded = self.encoders["visual"](frames)
        return self.encoders["vision_proj"](encoded.v_cls)

    @torch.no_grad()
    def embed_text(self, seq: TokenSequence) -> torch.Tensor:
        _, w_cls = self.encoders["text"].encode_text(seq)
        return self.encoders["text_proj"](w_cls)


@torch.no_grad()
def momentum_step(live: Mapping, mom: MomentumState) -> MomentumState:
    """mom ← m·mom + (1−m)·live for every momentum parameter."""
    m = mom.m
    for name, param in mom.named_momentum():
        if name not in live:
            raise ArgumentError(f"live parameters lack momentum parameter '{name}'")
        source = live[name]
        if source.shape != param.shape:
            raise ArgumentError(f"shape mismatch for parameter '{name}': "
                                f"live {tuple(source.shape)}, momentum {tuple(param.shape)}")
        param.mul_(m).add_(source.detach(), alpha=1.0 - m)
    return mom


def multi_positive_nll(logits: torch.Tensor, positives: torch.Tensor,
                       normalize: bool = True) -> torch.Tensor:
    """
    Per-row loss −Σ_{k∈P(i)} log softmax(logits_i)_k.

    ``positives`` is a boolean [B, N] mask that must hold at least one entry
    per row. With ``normalize`` the sum is divided by |P(i)|.
    """
    positives = positives.to(logits.dtype)
    loss = -(logits.log_softmax(dim=1) * positives).sum(dim=1)
    if normalize:
        loss = loss / positives.sum(dim=1)
    return loss


def univlc_loss(v: torch.Tensor, w: torch.Tensor, y: torch.Tensor, state: UniVLCState,
                keys: Optional[Tuple[torch.Tensor, torch.Tensor]] = None) -> torch.Tensor:
    """
    Symmetric label-aware contrastive loss.

    Args:
        v: live visual embeddings [B, d], unit norm
        w: live text embeddings [B, d], unit norm
        y: labels [B]
        state: temperature, bank and loss switches
        keys: current-batch momentum embeddings (v_m, w_m); defaults to the
            detached live embeddings

    The key set is the current batch followed by the bank contents. Positives
    of sample i are the keys sharing its label, which always includes i itself.
    """
    B = v.shape[0]
    key_v, key_w = keys if keys is not None else (v.detach(), w.detach())
    bank_v, bank_w, bank_y = state.bank.contents()

    all_v = torch.cat([key_v, bank_v.to(key_v.dtype)], dim=0)
    all_w = torch.cat([key_w, bank_w.to(key_w.dtype)], dim=0)
    all_y = torch.cat([y, bank_y.to(y.dtype)], dim=0)

    tau = state.tau.to(v.dtype)
    logits_v2t = v @ all_w.t() / tau
    logits_t2v = w @ all_v.t() / tau

    if state.mode == "vanilla":
        positives = torch.zeros(B, all_y.shape[0], dtype=torch.bool, device=v.device)
        positives[:, :B] = torch.eye(B, dtype=torch.bool, device=v.device)
    else:
        positives = y[:, None] == all_y[None, :]

    loss_v2t = multi_positive_nll(logits_v2t, positives, state.normalize_positives)
    loss_t2v = multi_positive_nll(logits_t2v, positives, state.normalize_positives)
    return 0.5 * (loss_v2t.mean() + loss_t2v.mean())


def sample_vlm_pairs(y: torch.Tensor, generator: Optional[torch.Generator] = None
                     ) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Draw the text index used for each visual and the VLM target.

    With probability ½ the own text is kept; otherwise the text of another
    batch element is swapped in. The target is 1 iff the labels agree.
    """
    B = y.shape[0]
    if B < 2:
        raise ArgumentError("VLM loss needs a batch of at least 2 to sample replacement texts")
    own = torch.arange(B)
    keep = torch.rand(B, generator=generator) < 0.5
    offset = torch.randint(1, B, (B,), generator=generator)
    index = torch.where(keep, own, (own + offset) % B).to(y.device)
    y_vlm = (y[index] == y).to(torch.get_default_dtype())
    return index, y_vlm


def vlm_bce(logits: torch.Tensor, y_vlm: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on p_vlm = softmax(logits)[:, 0]."""
    log_probs = logits.log_softmax(dim=-1)
    y_vlm = y_vlm.to(logits.dtype)
    return -(y_vlm * log_probs[:, 0] + (1.0 - y_vlm) * log_probs[:, 1]).mean()


def vlm_loss(visual, text: TokenSequence, y: torch.Tensor, align, vocab: Vocabulary,
             generator: Optional[torch.Generator] = None):
    """
    VLM loss for a batch of (visual, text) pairs.

    Returns:
        (loss, VlmPrediction with y_vlm filled in)
    """
    index, y_vlm = sample_vlm_pairs(y, generator)
    candidate = text.index_select(index).with_first(vocab.enc_id)
    prediction = align.vlm_head(align.fuse(candidate, visual))
    prediction.y_vlm = y_vlm
    return vlm_bce(prediction.logits, y_vlm), prediction


def lm_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean token NLL over positions where ``mask`` is 1."""
    total = mask.sum()
    if total == 0:
        raise ArgumentError("target sequence has no tokens to predict (all PAD)")
    nll = -logits.log_softmax(dim=-1).gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    mask = mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum()


def lm_loss(visual, target: TokenSequence, gen, vocab: Vocabulary) -> torch.Tensor:
    """
    Teacher-forced captioning loss.

    ``target`` is a [CLS]-led sequence closed by [EOS]. The decoder reads it with
    [DEC] at position 0 and predicts every following token, [EOS] included.
    """
    if target.mask[:, 1:].sum() == 0:
        raise ArgumentError("target sequence has no tokens to predict (all PAD)")
    has_eos = ((target.ids == vocab.eos_id) & target.mask.bool()).any(dim=1)
    if not has_eos.all():
        raise ArgumentError(f"target row {int((~has_eos).nonzero()[0])} lacks [EOS]")

    logits = gen.decode_logits(target.with_first(vocab.dec_id), visual)
    return lm_loss_from_logits(logits[:, :-1], target.ids[:, 1:], target.mask[:, 1:])


def qa_loss(visual, question: TokenSequence, answer: TokenSequence, align, gen,
            vocab: Vocabulary) -> torch.Tensor:
    """LM loss on the answer with the question fused into the decoder memory."""
    memory = fuse_question(visual, question, align, vocab)
    return lm_loss(memory, answer, gen, vocab)


@dataclass
class LossWeights:
    univlc: float = 1.0
    vlm: float = 1.0
    lm: float = 1.0

    def __post_init__(self):
        for name in ("univlc", "vlm", "lm"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"loss weight '{name}' must be nonnegative")

    @classmethod
    def from_config(cls, objectives_cfg) -> "LossWeights":
        return cls(objectives_cfg.lambda_univlc, objectives_cfg.lambda_vlm, objectives_cfg.lambda_lm)


@dataclass
class LossOutput:
    """Weighted total, per-term values for logging and the momentum keys to enqueue."""
    total: torch.Tensor
    breakdown: Dict[str, float] = field(default_factory=dict)
    keys: Optional[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = None


def total_loss(model, batch, weights: LossWeights, state: UniVLCState,
               momentum: Optional[MomentumState], vocab: Vocabulary,
               generator: Optional[torch.Generator] = None) -> LossOutput:
    """
    Weighted UniVLC + VLM + LM loss for one triplet batch.

    Terms with a zero weight are not computed and report 0 in the breakdown.
    The bank is left untouched; callers enqueue ``LossOutput.keys`` afterwards.
    """
    encoded, v = model.embed_visual(batch.frames)
    total = torch.zeros((), dtype=v.dtype, device=v.device)
    breakdown = {"univlc": 0.0, "vlm": 0.0, "lm": 0.0}
    keys = None

    if weights.univlc > 0:
        w = model.embed_text(batch.text)
        if momentum is not None:
            key_v = momentum.embed_visual(batch.frames)
            key_w = momentum.embed_text(batch.text)
        else:
            key_v, key_w = v.detach(), w.detach()
        term = univlc_loss(v, w, batch.y, state, keys=(key_v, key_w))
        total = total + weights.univlc * term
        breakdown["univlc"] = float(term.detach())
        keys = (key_v, key_w, batch.y)

    if weights.vlm > 0:
        term, _ = vlm_loss(encoded, batch.text, batch.y, model.align, vocab, generator)
        total = total + weights.vlm * term
        breakdown["vlm"] = float(term.detach())

    if weights.lm > 0:
        term = lm_loss(encoded, batch.text, model.gen, vocab)
        total = total + weights.lm * term
        breakdown["lm"] = float(term.detach())

    return LossOutput(total=total, breakdown=breakdown, keys=keys)
