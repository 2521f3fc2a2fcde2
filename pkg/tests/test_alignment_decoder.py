"""Tests for the visual-grounded alignment decoder"""

import pytest
import torch

from alignment_decoder import AlignmentDecoder, FusedRepresentation, vlm_from_logits
from errors import ArgumentError
from layers import CrossMemory
from text_encoder import tokenize_batch

pytestmark = pytest.mark.usefixtures("float64")


def fused_inputs(model, vocab, n=3):
    torch.manual_seed(1)
    frames = torch.rand(n, 1, 16, 16, 3)
    texts = tokenize_batch(["a picture of a red circle"] * n, vocab, 10).with_first(vocab.enc_id)
    return model.encode_visual(frames), texts


def randomize_cross_attention(align: AlignmentDecoder):
    with torch.no_grad():
        for proj in align.cross_attention_projections():
            proj.weight.normal_(std=0.5)


def test_zero_cross_attention_matches_text_only_path(toy_model, toy_vocab):
    visual, texts = fused_inputs(toy_model, toy_vocab)
    grounded = toy_model.align.fuse(texts, visual)
    text_only = toy_model.align.fuse(texts, None)
    assert torch.allclose(grounded.tokens, text_only.tokens, atol=1e-6)


def test_zero_cross_attention_ignores_visual(toy_model, toy_vocab):
    visual, texts = fused_inputs(toy_model, toy_vocab)
    other = toy_model.encode_visual(torch.rand(3, 1, 16, 16, 3))
    a = toy_model.align.fuse(texts, visual).enc_vec
    b = toy_model.align.fuse(texts, other).enc_vec
    assert torch.equal(a, b)


def test_visual_perturbation_changes_fusion_once_grounded(toy_model, toy_vocab):
    randomize_cross_attention(toy_model.align)
    visual, texts = fused_inputs(toy_model, toy_vocab)
    base = toy_model.align.fuse(texts, visual).enc_vec
    tokens = visual.tokens.clone()
    tokens[:, 1] += 1.0
    moved = toy_model.align.fuse(texts, CrossMemory(tokens, torch.ones(tokens.shape[:2], dtype=torch.long)))
    assert not torch.allclose(base, moved.enc_vec)


def test_identical_pairs_give_identical_rows(toy_model, toy_vocab):
    randomize_cross_attention(toy_model.align)
    frame = torch.rand(1, 1, 1, 16, 16, 3).expand(3, -1, -1, -1, -1, -1).reshape(3, 1, 16, 16, 3)
    visual = toy_model.encode_visual(frame)
    texts = tokenize_batch(["a red circle"] * 3, toy_vocab, 8).with_first(toy_vocab.enc_id)
    enc = toy_model.align.fuse(texts, visual).enc_vec
    assert torch.allclose(enc[0], enc[1]) and torch.allclose(enc[1], enc[2])


def test_batch_mismatch(toy_model, toy_vocab):
    visual, texts = fused_inputs(toy_model, toy_vocab, n=3)
    with pytest.raises(ArgumentError, match="batch mismatch"):
        toy_model.align.fuse(texts.index_select(torch.tensor([0, 1])), visual)


def test_zero_head_gives_half(toy_model, toy_vocab):
    torch.nn.init.zeros_(toy_model.align.match_head.weight)
    torch.nn.init.zeros_(toy_model.align.match_head.bias)
    visual, texts = fused_inputs(toy_model, toy_vocab)
    prediction = toy_model.align.vlm_head(toy_model.align.fuse(texts, visual))
    assert torch.allclose(prediction.p_vlm, torch.full((3,), 0.5))


def test_vlm_probabilities():
    prediction = vlm_from_logits(torch.tensor([[10.0, -10.0], [0.3, 1.2]]))
    assert abs(float(prediction.p_vlm[0]) - 1.0) < 1e-6
    probs = prediction.logits.softmax(dim=-1)
    assert torch.allclose(probs.sum(dim=-1), torch.ones(2))
    assert ((prediction.p_vlm > 0) & (prediction.p_vlm < 1)).all()


def test_fused_memory_keeps_mask():
    fused = FusedRepresentation(torch.zeros(2, 4, 8), torch.zeros(2, 8), torch.tensor([[1, 1, 0, 0], [1, 1, 1, 0]]))
    assert torch.equal(fused.memory().mask, fused.mask)
