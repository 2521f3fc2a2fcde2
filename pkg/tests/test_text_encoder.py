"""Tests for tokenization and the text encoder"""

import pytest
import torch

from errors import ArgumentError, ConfigError
from oracles import compare, fd_gradient
from text_encoder import (CLS, EOS, PAD, SPECIAL_TOKENS, TextEncoder, TokenSequence, Vocabulary,
                          tokenize_batch, tokenize_text)

pytestmark = pytest.mark.usefixtures("float64")


@pytest.fixture
def vocab():
    return Vocabulary.build(["a picture of a red circle", "a video of a blue square"])


def make_encoder(vocab, depth=2):
    torch.manual_seed(0)
    return TextEncoder(len(vocab), dim=16, heads=2, depth=depth, mlp_ratio=2.0, max_len=12)


def test_special_tokens_come_first(vocab):
    assert vocab.tokens[:len(SPECIAL_TOKENS)] == list(SPECIAL_TOKENS)
    assert len({vocab.pad_id, vocab.cls_id, vocab.enc_id, vocab.dec_id, vocab.eos_id}) == 5


def test_tokenize_prefix(vocab):
    seq = tokenize_text("a picture of", vocab, 6)
    expected = [vocab.cls_id, vocab.index["a"], vocab.index["picture"], vocab.index["of"],
                vocab.pad_id, vocab.pad_id]
    assert seq.ids[0].tolist() == expected
    assert seq.mask[0].tolist() == [1, 1, 1, 1, 0, 0]


def test_tokenize_truncates(vocab):
    seq = tokenize_text("a picture of a red circle", vocab, 4)
    assert seq.length == 4
    assert seq.mask.sum() == 4

    closed = tokenize_text("a picture of a red circle", vocab, 4, add_eos=True)
    assert closed.ids[0].tolist() == [vocab.cls_id, vocab.index["a"], vocab.index["picture"], vocab.eos_id]


def test_tokenize_is_deterministic(vocab):
    assert torch.equal(tokenize_text("a red square", vocab, 8).ids, tokenize_text("a red square", vocab, 8).ids)


def test_unknown_words_map_to_unk(vocab):
    assert tokenize_text("zebra", vocab, 4).ids[0, 1] == vocab.unk_id


def test_short_length_rejected(vocab):
    with pytest.raises(ArgumentError):
        tokenize_text("a", vocab, 1)


def test_vocabulary_validation(tmp_path, vocab):
    with pytest.raises(ConfigError):
        Vocabulary([])
    with pytest.raises(ConfigError, match="special"):
        Vocabulary([PAD, CLS, EOS])
    path = vocab.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(path).tokens == vocab.tokens


def test_decode_drops_special_tokens(vocab):
    seq = tokenize_text("a red circle", vocab, 8, add_eos=True)
    assert vocab.decode(seq.ids[0].tolist()) == "a red circle"


def test_out_of_range_id_names_position(vocab):
    encoder = make_encoder(vocab)
    ids = torch.tensor([[vocab.cls_id, 1, len(vocab) + 3]])
    with pytest.raises(ArgumentError, match=r"row=0, col=2"):
        encoder.encode_text(TokenSequence(ids, torch.ones_like(ids)))


def test_masked_positions_do_not_leak(vocab):
    encoder = make_encoder(vocab)
    seq = tokenize_batch(["a red circle", "a blue square"], vocab, 8)
    tokens, w_cls = encoder.encode_text(seq)

    ids = seq.ids.clone()
    ids[seq.mask == 0] = vocab.index["video"]
    tokens2, w_cls2 = encoder.encode_text(TokenSequence(ids, seq.mask))
    keep = seq.mask.bool()
    assert torch.equal(tokens[keep], tokens2[keep])
    assert torch.equal(w_cls, w_cls2)


def test_attention_is_bidirectional(vocab):
    encoder = make_encoder(vocab)
    seq = tokenize_text("a red circle", vocab, 6)
    tokens, _ = encoder.encode_text(seq)
    ids = seq.ids.clone()
    ids[0, 2] = vocab.index["blue"]
    perturbed, _ = encoder.encode_text(TokenSequence(ids, seq.mask))
    assert not torch.allclose(tokens[0, 1], perturbed[0, 1])


def test_batch_permutation(vocab):
    encoder = make_encoder(vocab)
    seq = tokenize_batch(["a red circle", "a blue square", "a video of"], vocab, 8)
    perm = torch.tensor([2, 0, 1])
    _, w = encoder.encode_text(seq)
    _, w_perm = encoder.encode_text(seq.index_select(perm))
    assert torch.allclose(w_perm, w[perm], atol=1e-12)


def test_gradient_two_tokens(vocab):
    encoder = make_encoder(vocab, depth=1)
    ids = torch.tensor([[vocab.cls_id, vocab.index["red"]]])
    seq = TokenSequence(ids, torch.ones_like(ids))
    weight = encoder.blocks[0].attn.kv.weight

    def f():
        return encoder.encode_text(seq)[1].pow(2).sum()

    f().backward()
    numeric = fd_gradient(f, weight)
    assert compare("text grad", weight.grad, numeric, 1e-4, relative=True).passed
