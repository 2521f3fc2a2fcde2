"""Tests for the visual-grounded generation decoder, decoding loops and QA path"""

import pytest
import torch

from errors import ArgumentError
from generation_decoder import GenerationConfig, fuse_question, qa_forward, qa_memory
from text_encoder import TokenSequence, tokenize_batch

pytestmark = pytest.mark.usefixtures("float64")


def random_grounding(model):
    with torch.no_grad():
        for block in model.gen.blocks:
            block.cross_attn.proj.weight.normal_(std=0.5)
        for proj in model.align.cross_attention_projections():
            proj.weight.normal_(std=0.5)


def test_causality(toy_model, toy_vocab):
    random_grounding(toy_model)
    gen = torch.Generator().manual_seed(0)
    visual = toy_model.encode_visual(torch.rand(2, 1, 16, 16, 3))
    L = 10
    for _ in range(20):
        ids = torch.randint(0, len(toy_vocab), (2, L), generator=gen)
        ids[:, 0] = toy_vocab.dec_id
        seq = TokenSequence(ids, torch.ones_like(ids))
        l = int(torch.randint(0, L - 1, (1,), generator=gen))
        perturbed = ids.clone()
        perturbed[:, l + 1:] = torch.randint(0, len(toy_vocab), (2, L - l - 1), generator=gen)

        a = toy_model.gen.decode_logits(seq, visual)
        b = toy_model.gen.decode_logits(TokenSequence(perturbed, seq.mask), visual)
        assert torch.equal(a[:, :l + 1], b[:, :l + 1])


def test_duplicated_frame_video_matches_image_at_init(toy_model, toy_vocab):
    frame = torch.rand(2, 1, 16, 16, 3)
    seq = tokenize_batch(["a red circle"] * 2, toy_vocab, 8, add_eos=True).with_first(toy_vocab.dec_id)
    image = toy_model.gen.decode_logits(seq, toy_model.encode_visual(frame))
    video = toy_model.gen.decode_logits(seq, toy_model.encode_visual(frame.expand(-1, 2, -1, -1, -1)))
    assert torch.allclose(image, video, atol=1e-5)


def test_batch_mismatch(toy_model, toy_vocab):
    visual = toy_model.encode_visual(torch.rand(2, 1, 16, 16, 3))
    seq = tokenize_batch(["a red circle"] * 3, toy_vocab, 8).with_first(toy_vocab.dec_id)
    with pytest.raises(ArgumentError):
        toy_model.gen.decode_logits(seq, visual)


def test_beam_of_one_equals_greedy(toy_model, toy_vocab):
    random_grounding(toy_model)
    visual = toy_model.encode_visual(torch.rand(3, 1, 16, 16, 3))
    greedy = toy_model.gen.generate(visual, toy_vocab, GenerationConfig(max_len=8))
    beam = toy_model.gen.generate(visual, toy_vocab, GenerationConfig(max_len=8, strategy="beam", width=1))
    assert [r.ids for r in greedy] == [r.ids for r in beam]
    assert [r.text for r in greedy] == [r.text for r in beam]


def test_wider_beam_scores_at_least_greedy(toy_model, toy_vocab):
    random_grounding(toy_model)
    visual = toy_model.encode_visual(torch.rand(2, 1, 16, 16, 3))
    greedy = toy_model.gen.generate(visual, toy_vocab, GenerationConfig(max_len=3))
    beam = toy_model.gen.generate(visual, toy_vocab, GenerationConfig(max_len=3, strategy="beam", width=4))
    for g, b in zip(greedy, beam):
        if g.truncated and b.truncated:
            assert b.score >= g.score - 1e-9


def test_max_len_one_is_empty_and_truncated(toy_model, toy_vocab):
    visual = toy_model.encode_visual(torch.rand(2, 1, 16, 16, 3))
    for result in toy_model.gen.generate(visual, toy_vocab, GenerationConfig(max_len=1)):
        assert result.text == ""
        assert result.truncated


def test_prefix_is_part_of_the_text(toy_model, toy_vocab):
    visual = toy_model.encode_visual(torch.rand(1, 1, 16, 16, 3))
    result = toy_model.gen.generate(visual, toy_vocab, GenerationConfig(max_len=4, prefix="a picture of"))[0]
    assert result.text.startswith("a picture of")
    assert result.truncated


def test_generation_config_validation(toy_model, toy_vocab):
    visual = toy_model.encode_visual(torch.rand(1, 1, 16, 16, 3))
    with pytest.raises(ArgumentError):
        toy_model.gen.generate(visual, toy_vocab, GenerationConfig(max_len=0))
    with pytest.raises(ArgumentError):
        toy_model.gen.generate(visual, toy_vocab, GenerationConfig(strategy="nucleus"))
    with pytest.raises(ArgumentError, match="exceeds"):
        toy_model.gen.generate(visual, toy_vocab, GenerationConfig(max_len=99))


def test_qa_memory_concatenates(toy_model, toy_vocab):
    visual = toy_model.encode_visual(torch.rand(2, 1, 16, 16, 3))
    question = tokenize_batch(["what shape is it"] * 2, toy_vocab, 8)
    memory = fuse_question(visual, question, toy_model.align, toy_vocab)
    assert memory.tokens.shape[1] == visual.tokens.shape[1] + 8
    assert memory.mask[:, visual.tokens.shape[1]:].tolist() == question.mask.tolist()


def test_empty_question_rejected(toy_model, toy_vocab):
    visual = toy_model.encode_visual(torch.rand(1, 1, 16, 16, 3))
    with pytest.raises(ArgumentError, match="question is empty"):
        qa_forward(visual, tokenize_batch([""], toy_vocab, 8), toy_model.align, toy_model.gen, toy_vocab)


def test_qa_forward_deterministic(toy_model, toy_vocab):
    random_grounding(toy_model)
    visual = toy_model.encode_visual(torch.rand(2, 1, 16, 16, 3))
    question = tokenize_batch(["what color is it"] * 2, toy_vocab, 8)
    first = qa_forward(visual, question, toy_model.align, toy_model.gen, toy_vocab)
    second = qa_forward(visual, question, toy_model.align, toy_model.gen, toy_vocab)
    assert [r.ids for r in first] == [r.ids for r in second]


def test_qa_answer_depends_only_on_question_at_zero_visual_grounding(toy_model, toy_vocab):
    with torch.no_grad():
        for proj in toy_model.align.cross_attention_projections():
            proj.weight.normal_(std=0.5)
    question = tokenize_batch(["what shape is it"], toy_vocab, 8)
    visual_a = toy_model.encode_visual(torch.rand(1, 1, 16, 16, 3))
    visual_b = toy_model.encode_visual(torch.rand(1, 1, 16, 16, 3))
    mem_a = qa_memory(visual_a, toy_model.align.fuse(question.with_first(toy_vocab.enc_id), None))
    mem_b = qa_memory(visual_b, toy_model.align.fuse(question.with_first(toy_vocab.enc_id), None))
    seq = tokenize_batch(["red"], toy_vocab, 4, add_eos=True).with_first(toy_vocab.dec_id)
    # generation cross-attention is still zero, so the memory contents do not matter
    assert torch.equal(toy_model.gen.decode_logits(seq, mem_a), toy_model.gen.decode_logits(seq, mem_b))


def test_lm_loss_decreases_on_fixed_pair(toy_model, toy_vocab):
    from objectives import lm_loss
    from trainer import build_optimizer

    frames = torch.rand(1, 1, 16, 16, 3)
    target = tokenize_batch(["a picture of a red circle"], toy_vocab, 10, add_eos=True)
    optimizer = build_optimizer(toy_model, 1e-2, 0.05)
    losses = []
    for _ in range(50):
        loss = lm_loss(toy_model.encode_visual(frames), target, toy_model.gen, toy_vocab)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
    increases = sum(b > a + 1e-3 for a, b in zip(losses, losses[1:]))
    assert increases <= 5
    assert losses[-1] < losses[0]
