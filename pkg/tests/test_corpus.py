"""Tests for prompt templating, manifests and the procedural corpus"""

import json

import numpy as np
import pytest

from corpus import (PromptTemplate, build_vocabulary, label_to_text, load_manifest, make_batch,
                    make_qa_pairs, read_payload, save_manifest, synth_corpus, write_payload)
from errors import ArgumentError, ConfigError, ManifestError, SchemaError
from evaluator import linear_probe
from settings import CorpusConfig


def test_label_to_text():
    assert label_to_text("dog", ["a photo of a {class}"]) == "a photo of a dog"
    assert label_to_text("jumping", ["a video of a person {class}"]) == "a video of a person jumping"
    templates = ["a photo of a {class}", "a picture of a {class}"]
    assert label_to_text("cat", templates) == label_to_text("cat", templates)
    assert label_to_text("cat", templates, 3) == "a picture of a cat"


def test_label_to_text_errors():
    with pytest.raises(ArgumentError):
        label_to_text("", ["a {class}"])
    with pytest.raises(ArgumentError):
        label_to_text("cat", [])
    with pytest.raises(ConfigError):
        PromptTemplate("no slot here")
    with pytest.raises(ConfigError):
        PromptTemplate("{class} and {class}")


def write_lines(path, records):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in records),
                    encoding="utf-8")
    return path


def test_manifest_label_grouping(tmp_path):
    for name in ("a.bin", "b.bin", "c.bin", "d.bin"):
        write_payload(tmp_path / name, np.zeros((1, 4, 4, 3), dtype=np.float32))
    manifest = write_lines(tmp_path / "manifest.jsonl", [
        {"source": "a.bin", "modality": "image", "class": "cat"},
        {"source": "b.bin", "modality": "image", "class": "cat"},
        {"source": "c.bin", "modality": "image", "caption": "a cat on a mat"},
        {"source": "d.bin", "modality": "image", "caption": "a cat on a mat"},
    ])
    corpus = load_manifest(manifest)
    assert corpus[0].y == corpus[1].y and corpus[0].t == corpus[1].t
    assert corpus[2].y != corpus[3].y
    assert len({t.y for t in corpus}) == 3

    grouped = load_manifest(manifest, CorpusConfig(group_identical_captions=True))
    assert grouped[2].y == grouped[3].y

    without_labels = load_manifest(manifest, CorpusConfig(exclude_label_data=True))
    assert len(without_labels) == 2


def test_empty_manifest(tmp_path):
    assert len(load_manifest(write_lines(tmp_path / "m.jsonl", []))) == 0


def test_missing_manifest_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nowhere.jsonl"):
        load_manifest(tmp_path / "nowhere.jsonl")


def test_malformed_line_reports_line_number(tmp_path):
    manifest = write_lines(tmp_path / "m.jsonl", [
        {"source": "a.bin", "modality": "image", "class": "cat"},
        "{not json",
    ])
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(manifest)


@pytest.mark.parametrize("record, message", [
    ({"source": "a.bin", "modality": "image", "class": "cat", "caption": "a cat"}, "both"),
    ({"source": "a.bin", "modality": "audio", "class": "cat"}, "modality"),
    ({"modality": "image", "class": "cat"}, "source"),
    ({"source": "a.bin", "modality": "image"}, "caption"),
    ({"source": "a.bin", "modality": "image", "class": "cat", "colour": "red"}, "unknown"),
])
def test_schema_errors(tmp_path, record, message):
    with pytest.raises(SchemaError, match=message):
        load_manifest(write_lines(tmp_path / "m.jsonl", [record]))


def test_payload_header(tmp_path):
    array = np.random.default_rng(0).random((2, 4, 6, 3)).astype(np.float32)
    path = write_payload(tmp_path / "x.bin", array)
    raw = path.read_bytes()
    assert np.frombuffer(raw[:8], dtype="<u2").tolist() == [2, 4, 6, 3]
    assert np.array_equal(read_payload(path), array)

    path.write_bytes(raw[:-4])
    with pytest.raises(ArgumentError):
        read_payload(path)


def test_synth_is_deterministic():
    a = synth_corpus(seed=0, video_fraction=0.5)
    b = synth_corpus(seed=0, video_fraction=0.5)
    assert len(a) == len(b) == 64
    for x, y in zip(a, b):
        assert x.y == y.y and x.t == y.t and x.modality == y.modality
        assert x.load().tobytes() == y.load().tobytes()


def test_synth_sizes_and_labels():
    corpus = synth_corpus(seed=0, n_classes=2, n_per_class=4)
    assert len(corpus) == 8
    assert len({t.y for t in corpus}) == 2
    for a in corpus:
        for b in corpus:
            if a.class_name == b.class_name:
                assert a.y == b.y and a.t == b.t


def test_synth_video_fraction_and_held_out():
    corpus = synth_corpus(seed=1, n_classes=3, n_per_class=4, video_T=4, video_fraction=0.5, held_out_per_class=1)
    assert len(corpus.indices("video", "train")) == 6
    assert len(corpus.indices("image", "train")) == 6
    assert len(corpus.indices("image", "test")) == 3
    assert len(corpus.indices("video", "test")) == 3
    assert corpus[corpus.indices("video")[0]].load().shape == (4, 32, 32, 3)
    # image and video samples of one class are distinct labels
    image_y = {corpus[i].y for i in corpus.indices("image")}
    video_y = {corpus[i].y for i in corpus.indices("video")}
    assert not image_y & video_y


def test_synth_rejects_bad_sizes():
    with pytest.raises(ArgumentError):
        synth_corpus(n_classes=0)
    with pytest.raises(ArgumentError):
        synth_corpus(video_fraction=1.5)


def test_pixels_are_linearly_separable():
    corpus = synth_corpus(seed=0, n_classes=2, n_per_class=16)
    features = np.stack([t.load().reshape(-1) for t in corpus])
    labels = [t.y for t in corpus]
    assert linear_probe(features, labels, features, labels).train_accuracy >= 0.99


def test_manifest_round_trip(tmp_path):
    corpus = synth_corpus(seed=2, n_classes=3, n_per_class=2, video_T=2, video_fraction=0.5, held_out_per_class=1)
    loaded = load_manifest(save_manifest(corpus, tmp_path))
    assert len(loaded) == len(corpus)
    for original, copy in zip(corpus, loaded):
        assert (copy.y, copy.t, copy.modality, copy.split, copy.class_name) == \
               (original.y, original.t, original.modality, original.split, original.class_name)
        assert np.array_equal(copy.load(), original.load())


def test_save_manifest_is_byte_stable(tmp_path):
    corpus = synth_corpus(seed=0, n_classes=2, n_per_class=2)
    save_manifest(corpus, tmp_path / "a")
    save_manifest(corpus, tmp_path / "b")
    for name in ("manifest.jsonl", "payloads/00000.bin", "payloads/00003.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_template_cycling():
    corpus = synth_corpus(seed=0, n_classes=1, n_per_class=1, template_cycling=True)
    texts = [corpus.text_of(0, epoch) for epoch in range(3)]
    assert len(set(texts)) == 3
    assert texts[0] == corpus[0].t


def test_qa_pairs_and_vocabulary():
    corpus = synth_corpus(seed=0, n_classes=2, n_per_class=2, video_fraction=0.5)
    pairs = make_qa_pairs(corpus)
    assert len(pairs) == 2 * 2 * 2 + 2 * 1
    vocab = build_vocabulary(corpus)
    for pair in pairs:
        assert all(word in vocab for word in pair.question.split() + [pair.answer])


def test_make_batch_rejects_mixed_modalities():
    corpus = synth_corpus(seed=0, n_classes=2, n_per_class=2, video_fraction=0.5)
    vocab = build_vocabulary(corpus)
    with pytest.raises(ArgumentError, match="mixes"):
        make_batch(corpus, [corpus.indices("image")[0], corpus.indices("video")[0]], vocab, 10)
    batch = make_batch(corpus, corpus.indices("image"), vocab, 10)
    assert batch.modality == "image"
    assert (batch.text.ids == vocab.eos_id).sum() == batch.size
