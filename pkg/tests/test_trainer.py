"""Tests for the batch plan, LR schedule, optimizer, checkpoints and the training loop"""

import math

import pytest
import torch

from conftest import toy_experiment
from corpus import build_vocabulary, load_corpus, make_batch, make_qa_pairs
from errors import ConfigError, TrainingError
from evaluator import caption_eval, evaluate_retrieval, qa_eval
from objectives import LossWeights, UniVLCState, total_loss
from settings import ScheduleConfig, StageConfig
from state_store import RunStatus, RunStore, load_checkpoint, save_checkpoint
from trainer import (build_optimizer, build_stages, finetune_qa, init_training_state, lr_at,
                     plan_batches, restore_model, train)

TOY_SIZES = {"image": 8, "video": 8}


def toy_schedule(**kwargs) -> ScheduleConfig:
    values = dict(image_epochs=2, joint_epochs=1, warmup_steps=2, batch_image=4, batch_video=4)
    values.update(kwargs)
    return ScheduleConfig(**values)


def modalities(plan):
    return "".join(item.modality[0].upper() for item in plan)


def setup_run(cfg):
    corpus = load_corpus(cfg.corpus)
    return corpus, build_vocabulary(corpus, [cfg.eval.caption_prefix])


# ----------------------------------------------------------------------------
# Plan and schedule
# ----------------------------------------------------------------------------

def test_decoupled_plan_alternates_after_image_stage():
    plan = plan_batches(toy_schedule(), TOY_SIZES)
    assert modalities(plan) == "IIIIIVIV"
    assert [item.stage for item in plan] == [0, 0, 0, 0, 1, 1, 1, 1]
    assert plan[4].stage_name == "joint" and plan[4].step_in_stage == 0


@pytest.mark.parametrize("paradigm, expected", [
    ("image_only", "IIIIII"),
    ("img2vid", "IIIIVV"),
    ("joint_scratch", "IVIVIVIVIVIV"),
    ("video_only", "VVVVVV"),
])
def test_paradigm_plans(paradigm, expected):
    assert modalities(plan_batches(toy_schedule(paradigm=paradigm), TOY_SIZES)) == expected


def test_plan_is_deterministic_and_covers_each_pass():
    a = plan_batches(toy_schedule(), TOY_SIZES, seed=3)
    b = plan_batches(toy_schedule(), TOY_SIZES, seed=3)
    assert [x.positions for x in a] == [x.positions for x in b]
    first_pass = sorted(a[0].positions + a[1].positions)
    assert first_pass == list(range(8))


def test_plan_rejects_missing_source():
    with pytest.raises(ConfigError, match="video"):
        plan_batches(toy_schedule(), {"image": 8, "video": 0})


def test_budget_steps_split_across_stages():
    plan = plan_batches(toy_schedule(budget_steps=5), TOY_SIZES)
    assert len(plan) == 5
    assert {item.stage for item in plan} == {0, 1}
    with pytest.raises(ConfigError):
        plan_batches(toy_schedule(budget_steps=1), TOY_SIZES)


def test_explicit_stages_win_over_paradigm():
    stages = [StageConfig("warm", ["video"], 1, batch_video=4), StageConfig("both", ["image", "video"], 1)]
    schedule = toy_schedule(paradigm="image_only", stages=stages)
    assert [s.name for s in build_stages(schedule)] == ["warm", "both"]
    assert modalities(plan_batches(schedule, TOY_SIZES)).startswith("VV")


def test_lr_schedule():
    stage = StageConfig(peak_lr=1e-3, warmup_steps=4, decay_rate=0.85)
    assert lr_at(0, stage, 20) == 0.0
    assert lr_at(2, stage, 20) == pytest.approx(5e-4)
    assert lr_at(4, stage, 20) == pytest.approx(1e-3)
    assert abs(lr_at(19, stage, 20) - 0.85e-3) <= 1e-9
    values = [lr_at(s, stage, 20) for s in range(4, 20)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_weight_decay_groups(toy_model):
    optimizer = build_optimizer(toy_model, 1e-3, 0.05)
    decay, no_decay = optimizer.param_groups
    assert decay["weight_decay"] == 0.05 and no_decay["weight_decay"] == 0.0
    assert all(p.ndim >= 2 for p in decay["params"])
    assert all(p.ndim < 2 for p in no_decay["params"])
    assert len(decay["params"]) + len(no_decay["params"]) == len(list(toy_model.parameters()))
    assert any(p is toy_model.temperature.log_tau for p in no_decay["params"])


# ----------------------------------------------------------------------------
# Parameter coupling
# ----------------------------------------------------------------------------

def backward_one(state, corpus, vocab, cfg, modality):
    indices = corpus.indices(modality, "train")[:4]
    batch = make_batch(corpus, indices, vocab, cfg.corpus.text_len, dtype=torch.float64)
    univlc = UniVLCState(state.model.temperature, state.bank)
    state.model.zero_grad(set_to_none=True)
    total_loss(state.model, batch, LossWeights(), univlc, state.momentum, vocab, state.generator).total.backward()
    return state.model.registry().touched()


def test_image_batches_leave_video_parameters_alone():
    cfg = toy_experiment(["train.dtype=float64"])
    corpus, vocab = setup_run(cfg)
    state = init_training_state(cfg, vocab)
    video_only = {f"visual.{name}" for name in state.model.visual.video_only_parameter_names()}
    assert video_only

    touched = backward_one(state, corpus, vocab, cfg, "image")
    assert not touched & video_only
    assert {"ve", "te", "ad", "gd", "proj"} <= state.model.registry().touched_groups()

    touched = backward_one(state, corpus, vocab, cfg, "video")
    assert touched & video_only


def test_registry_groups(toy_model):
    registry = toy_model.registry()
    assert registry.groups == ["ve", "te", "ad", "gd", "proj"]
    assert len(registry) == len(list(toy_model.parameters()))
    assert registry.group_of("temperature.log_tau") == "proj"
    assert all(name.startswith("visual.") for name in registry.group("ve"))
    with pytest.raises(ConfigError):
        registry.group("decoder")


# ----------------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------------

def test_training_is_deterministic():
    cfg = toy_experiment()
    corpus, vocab = setup_run(cfg)
    first = train(cfg, corpus, vocab).metrics
    second = train(cfg, corpus, vocab).metrics
    assert len(first) == 8
    assert first == second
    assert [r["stage"] for r in first] == ["image"] * 4 + ["joint"] * 4
    assert all(math.isfinite(r["loss_total"]) for r in first)


def test_store_records_metrics_and_checkpoints(tmp_path):
    cfg = toy_experiment()
    corpus, vocab = setup_run(cfg)
    store = RunStore(tmp_path)
    train(cfg, corpus, vocab, store)

    assert store.status == RunStatus.COMPLETED
    assert [r["step"] for r in store.read_metrics()] == list(range(8))
    assert [p.name for p in store.list_checkpoints()] == ["ckpt_00000004.npz", "ckpt_00000008.npz"]

    arrays = load_checkpoint(store.latest_checkpoint())
    assert int(arrays["counter/steps_done"]) == 8
    model = restore_model(cfg, len(vocab), arrays)
    assert not model.training


def test_checkpoint_bytes_survive_reload(tmp_path):
    cfg = toy_experiment()
    corpus, vocab = setup_run(cfg)
    store = RunStore(tmp_path / "run")
    train(cfg, corpus, vocab, store)
    original = store.latest_checkpoint()
    copy = save_checkpoint(tmp_path / "copy.npz", load_checkpoint(original))
    assert copy.read_bytes() == original.read_bytes()


def test_resume_reproduces_losses(tmp_path):
    cfg = toy_experiment(["train.dtype=float64"])
    corpus, vocab = setup_run(cfg)
    reference = train(cfg, corpus, vocab).metrics

    store = RunStore(tmp_path)
    train(cfg, corpus, vocab, store)
    store.latest_checkpoint().unlink()
    assert store.latest_checkpoint().name == "ckpt_00000004.npz"

    resumed = train(cfg, corpus, vocab, store, resume=True)
    assert [r["step"] for r in resumed.metrics] == [4, 5, 6, 7]
    for ours, theirs in zip(resumed.metrics, reference[4:]):
        assert abs(ours["loss_total"] - theirs["loss_total"]) <= 1e-6
    assert [r["step"] for r in store.read_metrics()] == list(range(8))


def test_resume_rejects_other_config(tmp_path):
    cfg = toy_experiment()
    corpus, vocab = setup_run(cfg)
    store = RunStore(tmp_path)
    train(cfg, corpus, vocab, store)
    other = toy_experiment(["objectives.lambda_lm=0.5"])
    with pytest.raises(ConfigError, match="different configuration"):
        train(other, corpus, vocab, store, resume=True)


def test_restore_rejects_mismatched_shapes(tmp_path):
    cfg = toy_experiment()
    corpus, vocab = setup_run(cfg)
    store = RunStore(tmp_path)
    train(cfg, corpus, vocab, store)
    arrays = load_checkpoint(store.latest_checkpoint())
    with pytest.raises(ValueError, match="shape"):
        restore_model(toy_experiment(["model.dim=32"]), len(vocab), arrays)


def test_non_finite_loss_fails_the_run(tmp_path):
    cfg = toy_experiment()
    corpus, vocab = setup_run(cfg)
    model = init_training_state(cfg, vocab).model
    with torch.no_grad():
        model.vision_proj.linear.weight.fill_(float("nan"))
    store = RunStore(tmp_path)
    with pytest.raises(TrainingError, match="step 0"):
        train(cfg, corpus, vocab, store, model=model)
    assert store.status == RunStatus.FAILED
    assert "non-finite" in store.get_run()["last_error"]


def test_text_len_must_fit_the_model():
    cfg = toy_experiment(["corpus.text_len=20"])
    corpus, vocab = setup_run(cfg)
    with pytest.raises(ConfigError, match="max_text_len"):
        train(cfg, corpus, vocab)


@pytest.mark.slow
def test_overfits_a_tiny_corpus():
    cfg = toy_experiment(["schedule.paradigm=image_only", "schedule.image_epochs=150",
                          "schedule.joint_epochs=0", "schedule.image_lr=1e-3", "objectives.bank_size=8",
                          "train.log_interval=50", "train.checkpoint_interval=1000"],
                         n_classes=4, n_per_class=2, video_fraction=0.0)
    corpus, vocab = setup_run(cfg)
    assert len(corpus) == 8
    model = train(cfg, corpus, vocab).model
    result = evaluate_retrieval(model, corpus, corpus.indices("image"), vocab, cfg.corpus.text_len, k=8)
    assert result.recall["v2t"][1] == 1.0
    assert result.recall["t2v"][1] == 1.0

    captions = caption_eval(model, corpus, corpus.indices("image"), vocab, max_len=10,
                            image_prefix=cfg.eval.caption_prefix)
    assert captions.exact_match == 1.0, captions.candidates

    pairs = make_qa_pairs(corpus)
    losses = finetune_qa(model, corpus, pairs, vocab, "desk", seed=cfg.seed)
    assert losses[-1] < losses[0]
    answers = qa_eval(model, corpus, pairs, vocab)
    assert answers.accuracy == 1.0, list(zip(answers.predictions, answers.answers))
