"""Shared fixtures: src on the import path, toy configs, vocabulary and model."""

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from corpus import build_vocabulary, synth_corpus  # noqa: E402
from model import OmniVL  # noqa: E402
from settings import ExperimentConfig, ModelConfig, load_config  # noqa: E402


TOY_MODEL = dict(image_size=16, patch_size=8, channels=3, dim=16, heads=2, depth=1, text_depth=1,
                 decoder_depth=1, mlp_ratio=2.0, max_frames=4, proj_dim=8, max_text_len=12)


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def toy_model_cfg() -> ModelConfig:
    return ModelConfig(**TOY_MODEL)


@pytest.fixture
def toy_corpus():
    return synth_corpus(seed=0, n_classes=4, n_per_class=4, image_size=16, video_T=2, video_fraction=0.5)


@pytest.fixture
def toy_vocab(toy_corpus):
    return build_vocabulary(toy_corpus, ["a picture of"])


@pytest.fixture
def toy_model(float64, toy_model_cfg, toy_vocab) -> OmniVL:
    torch.manual_seed(0)
    return OmniVL(toy_model_cfg, len(toy_vocab))


def toy_overrides(**synth) -> list:
    """Dotted overrides for a tiny but complete experiment (8 steps, checkpoints at 4 and 8)."""
    items = [f"model.{k}={v}" for k, v in TOY_MODEL.items()]
    items += ["corpus.text_len=10", "corpus.synth.image_size=16", "corpus.synth.video_T=2",
              "corpus.synth.n_classes=4", "corpus.synth.n_per_class=4",
              "corpus.synth.video_fraction=0.5", "objectives.bank_size=16",
              "schedule.image_epochs=2", "schedule.joint_epochs=1", "schedule.warmup_steps=2",
              "schedule.batch_image=4", "schedule.batch_video=4",
              "train.log_interval=1", "train.checkpoint_interval=4", "train.show_progress=false"]
    items += [f"corpus.synth.{k}={v}" for k, v in synth.items()]
    return items


def toy_experiment(overrides=(), **synth) -> ExperimentConfig:
    return load_config(None, toy_overrides(**synth) + list(overrides))


@pytest.fixture
def toy_cfg() -> ExperimentConfig:
    return toy_experiment()
