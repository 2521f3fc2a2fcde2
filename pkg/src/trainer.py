#!/usr/bin/env python3
"""
Trainer Module

Decoupled joint pretraining driver:
- Stage layout per paradigm (decoupled, image_only, video_only, joint_scratch, img2vid)
- Deterministic batch plan: joint stages strictly alternate image/video batches
- Linear warmup then linear decay to peak·decay_rate at the end of each stage
- AdamW step, momentum update and memory bank enqueue per batch
- Metrics lines and rotated checkpoints through the RunStore, with resume
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from corpus import Corpus, QAPair, make_batch, stack_frames
from errors import ArgumentError, ConfigError, TrainingError
from model import OmniVL, build_model
from objectives import (LossWeights, MemoryBank, MomentumState, UniVLCState, enqueue,
                        momentum_step, qa_loss, total_loss)
from settings import FINETUNE_PRESETS, StageConfig, config_hash
from state_store import RunStatus, RunStore, load_checkpoint
from text_encoder import Vocabulary, tokenize_batch

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


# ----------------------------------------------------------------------------
# Schedule
# ----------------------------------------------------------------------------

def build_stages(schedule_cfg) -> List[StageConfig]:
    """Stage layout for the configured paradigm, unless stages are given explicitly."""
    if schedule_cfg.stages:
        return list(schedule_cfg.stages)

    s = schedule_cfg
    common = dict(batch_image=s.batch_image, batch_video=s.batch_video,
                  warmup_steps=s.warmup_steps, decay_rate=s.decay_rate)
    total_epochs = s.image_epochs + s.joint_epochs

    if s.paradigm == "decoupled":
        return [StageConfig("image", ["image"], s.image_epochs, peak_lr=s.image_lr, **common),
                StageConfig("joint", ["image", "video"], s.joint_epochs, peak_lr=s.joint_lr, **common)]
    if s.paradigm == "img2vid":
        return [StageConfig("image", ["image"], s.image_epochs, peak_lr=s.image_lr, **common),
                StageConfig("video", ["video"], s.joint_epochs, peak_lr=s.joint_lr, **common)]
    if s.paradigm == "image_only":
        return [StageConfig("image", ["image"], total_epochs, peak_lr=s.image_lr, **common)]
    if s.paradigm == "video_only":
        return [StageConfig("video", ["video"], total_epochs, peak_lr=s.image_lr, **common)]
    if s.paradigm == "joint_scratch":
        return [StageConfig("joint", ["image", "video"], total_epochs, peak_lr=s.image_lr, **common)]
    raise ConfigError(f"unknown paradigm '{s.paradigm}'")


@dataclass
class BatchDescriptor:
    """One planned batch. ``positions`` index into the modality's sample list."""
    stage: int
    stage_name: str
    modality: str
    positions: List[int]
    epoch: int
    step_in_stage: int
    stage_steps: int


def _batch_size(stage: StageConfig, modality: str, available: int) -> int:
    wanted = stage.batch_image if modality == "image" else stage.batch_video
    return max(1, min(wanted, available))


class _Stream:
    """Endless shuffled pass over one modality; reshuffles when exhausted."""

    def __init__(self, size: int, batch: int, rng: np.random.Generator):
        self.size = size
        self.batch = batch
        self.rng = rng
        self.order = rng.permutation(size)
        self.offset = 0

    @property
    def batches_per_pass(self) -> int:
        return max(1, self.size // self.batch)

    def take(self) -> List[int]:
        if self.offset + self.batch > self.size:
            self.order = self.rng.permutation(self.size)
            self.offset = 0
        chunk = self.order[self.offset:self.offset + self.batch]
        self.offset += self.batch
        return [int(i) for i in chunk]


def _stage_steps(stages: Sequence[StageConfig], per_epoch: List[int], budget_steps: Optional[int]) -> List[int]:
    natural = [stage.epochs * n for stage, n in zip(stages, per_epoch)]
    if budget_steps is None:
        return natural
    if budget_steps < len(stages):
        raise ConfigError(f"schedule.budget_steps={budget_steps} is smaller than the number of stages")
    total = sum(natural) or len(stages)
    steps = [max(1, int(round(budget_steps * n / total))) for n in natural]
    steps[-1] = max(1, budget_steps - sum(steps[:-1]))
    return steps


def plan_batches(schedule_cfg, sizes: Mapping[str, int], seed: int = 0) -> List[BatchDescriptor]:
    """
    Deterministic batch plan.

    Args:
        schedule_cfg: ScheduleConfig
        sizes: number of training samples per modality
        seed: plan seed

    Single-source stages run ``size // batch`` batches per epoch. Joint stages
    alternate image and video batches, image first, for ``2·max`` of the two
    per-modality counts per epoch. With ``budget_steps`` the stages share that
    many steps in proportion to their natural lengths.
    """
    stages = build_stages(schedule_cfg)
    streams_per_stage = []
    per_epoch = []
    for index, stage in enumerate(stages):
        if not stage.sources:
            raise ConfigError(f"stage '{stage.name}' has no sources")
        for source in stage.sources:
            if sizes.get(source, 0) < 1:
                raise ConfigError(f"stage '{stage.name}' needs {source} data but the corpus has none")
        streams = {}
        for source in ("image", "video"):
            if source in stage.sources:
                rng = np.random.default_rng([seed, index, 0 if source == "image" else 1])
                streams[source] = _Stream(sizes[source], _batch_size(stage, source, sizes[source]), rng)
        streams_per_stage.append(streams)
        if len(streams) == 2:
            per_epoch.append(2 * max(s.batches_per_pass for s in streams.values()))
        else:
            per_epoch.append(next(iter(streams.values())).batches_per_pass)

    plan = []
    for index, (stage, streams, n_steps) in enumerate(
            zip(stages, streams_per_stage, _stage_steps(stages, per_epoch, schedule_cfg.budget_steps))):
        order = [m for m in ("image", "video") if m in streams]
        for step in range(n_steps):
            modality = order[step % len(order)]
            plan.append(BatchDescriptor(
                stage=index,
                stage_name=stage.name,
                modality=modality,
                positions=streams[modality].take(),
                epoch=step // per_epoch[index],
                step_in_stage=step,
                stage_steps=n_steps,
            ))
    return plan


def lr_at(step: int, stage: StageConfig, total_steps: int) -> float:
    """
    Learning rate at ``step`` of a stage with ``total_steps`` steps.

    Linear 0 → peak over ``warmup_steps``, then linear peak → peak·decay_rate
    reached at the stage's last step.
    """
    if step < 0:
        raise ArgumentError(f"step must be nonnegative, got {step}")
    peak = stage.peak_lr
    if step < stage.warmup_steps:
        return peak * step / stage.warmup_steps
    span = total_steps - 1 - stage.warmup_steps
    progress = min(1.0, (step - stage.warmup_steps) / span) if span > 0 else 1.0
    return peak * (1.0 - (1.0 - stage.decay_rate) * progress)


# ----------------------------------------------------------------------------
# Training state and checkpoints
# ----------------------------------------------------------------------------

def build_optimizer(model: torch.nn.Module, lr: float, weight_decay: float, betas=(0.9, 0.999)):
    """AdamW; matrices and convolution kernels decay, biases/norms/scalars do not."""
    decay = [p for p in model.parameters() if p.requires_grad and p.ndim >= 2]
    no_decay = [p for p in model.parameters() if p.requires_grad and p.ndim < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=lr, betas=tuple(betas),
    )


def _to_numpy(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().copy()


@dataclass
class TrainingState:
    model: OmniVL
    momentum: MomentumState
    bank: MemoryBank
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    config_hash: str
    steps_done: int = 0

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for prefix, module in (("model", self.model), ("momentum", self.momentum), ("bank", self.bank)):
            for name, tensor in module.state_dict().items():
                arrays[f"{prefix}/{name}"] = _to_numpy(tensor)
        for index, entry in self.optimizer.state_dict()["state"].items():
            for key, value in entry.items():
                value = value if torch.is_tensor(value) else torch.tensor(value)
                arrays[f"optimizer/{index}/{key}"] = _to_numpy(value)
        arrays["counter/steps_done"] = np.asarray(self.steps_done, dtype=np.int64)
        arrays["rng/vlm"] = _to_numpy(self.generator.get_state())
        arrays["meta/config_hash"] = np.asarray(self.config_hash)
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray], check_hash: bool = True):
        stored_hash = str(arrays["meta/config_hash"])
        if check_hash and stored_hash != self.config_hash:
            raise ConfigError(f"checkpoint was written by a different configuration "
                              f"(hash {stored_hash[:12]}, expected {self.config_hash[:12]})")

        for prefix, module in (("model", self.model), ("momentum", self.momentum), ("bank", self.bank)):
            state = {name[len(prefix) + 1:]: torch.from_numpy(array.copy())
                     for name, array in arrays.items() if name.startswith(prefix + "/")}
            module.load_state_dict(state)

        optimizer_state: Dict[int, Dict[str, torch.Tensor]] = {}
        for name, array in arrays.items():
            if name.startswith("optimizer/"):
                _, index, key = name.split("/", 2)
                optimizer_state.setdefault(int(index), {})[key] = torch.from_numpy(array.copy())
        state_dict = self.optimizer.state_dict()
        state_dict["state"] = optimizer_state
        self.optimizer.load_state_dict(state_dict)

        self.generator.set_state(torch.from_numpy(arrays["rng/vlm"].copy()))
        self.steps_done = int(arrays["counter/steps_done"])


def init_training_state(cfg, vocab: Vocabulary, model: Optional[OmniVL] = None) -> TrainingState:
    """Seeded model, momentum copies, bank, optimizer and sampling generator."""
    if cfg.train.dtype not in DTYPES:
        raise ConfigError(f"train.dtype must be one of {', '.join(DTYPES)}")
    torch.manual_seed(cfg.seed)
    dtype, device = DTYPES[cfg.train.dtype], torch.device(cfg.train.device)
    model = (model or build_model(cfg, len(vocab))).to(device=device, dtype=dtype)
    momentum = MomentumState(model.momentum_modules(), cfg.objectives.momentum)
    bank = MemoryBank(cfg.objectives.bank_size, cfg.model.proj_dim).to(device=device, dtype=dtype)
    optimizer = build_optimizer(model, 0.0, cfg.train.weight_decay, cfg.train.betas)
    generator = torch.Generator().manual_seed(cfg.seed)
    return TrainingState(model, momentum, bank, optimizer, generator, config_hash(cfg))


def restore_model(cfg, vocab_size: int, arrays: Mapping[str, np.ndarray]) -> OmniVL:
    """Model weights only (``model/`` entries) from checkpoint arrays."""
    dtype, device = DTYPES[cfg.train.dtype], torch.device(cfg.train.device)
    model = build_model(cfg, vocab_size).to(device=device, dtype=dtype)
    state = {name[len("model/"):]: torch.from_numpy(array.copy())
             for name, array in arrays.items() if name.startswith("model/")}
    missing = sorted(set(model.state_dict()) - set(state))
    if missing:
        raise ArgumentError(f"checkpoint lacks {len(missing)} model tensors, e.g. '{missing[0]}'")
    unexpected = sorted(set(state) - set(model.state_dict()))
    if unexpected:
        raise ArgumentError(f"checkpoint holds unknown tensor '{unexpected[0]}'")
    for name, tensor in model.state_dict().items():
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ArgumentError(f"checkpoint tensor '{name}' has shape {tuple(state[name].shape)}, "
                                f"model expects {tuple(tensor.shape)}")
    model.load_state_dict(state)
    model.eval()
    return model


@dataclass
class TrainResult:
    state: TrainingState
    metrics: List[Dict] = field(default_factory=list)

    @property
    def model(self) -> OmniVL:
        return self.state.model


def _modality_indices(corpus: Corpus) -> Dict[str, List[int]]:
    return {m: corpus.indices(modality=m, split="train") for m in ("image", "video")}


def train(cfg, corpus: Corpus, vocab: Vocabulary, store: Optional[RunStore] = None,
          model: Optional[OmniVL] = None, resume: bool = False) -> TrainResult:
    """
    Run the configured pretraining schedule.

    Args:
        cfg: ExperimentConfig
        corpus: training corpus (samples with ``split == "train"`` are used)
        vocab: shared vocabulary
        store: run store for metrics and checkpoints (optional)
        model: model to continue from; a fresh seeded one when omitted
        resume: continue from the store's newest checkpoint

    Returns:
        TrainResult with the final state and the metric records of this call
    """
    if cfg.corpus.text_len > cfg.model.max_text_len:
        raise ConfigError(f"corpus.text_len {cfg.corpus.text_len} exceeds model.max_text_len "
                          f"{cfg.model.max_text_len}")

    by_modality = _modality_indices(corpus)
    plan = plan_batches(cfg.schedule, {m: len(ix) for m, ix in by_modality.items()}, cfg.seed)
    stages = build_stages(cfg.schedule)

    state = init_training_state(cfg, vocab, model)
    dtype = DTYPES[cfg.train.dtype]
    device = torch.device(cfg.train.device)
    weights = LossWeights.from_config(cfg.objectives)
    univlc = UniVLCState(state.model.temperature, state.bank,
                         cfg.objectives.normalize_positives, cfg.objectives.contrastive_mode)
    registry = state.model.registry()

    if store and resume and store.latest_checkpoint():
        checkpoint = store.latest_checkpoint()
        state.load_arrays(load_checkpoint(checkpoint))
        store.truncate_metrics(state.steps_done - 1)
        logger.info(f"Resumed from {checkpoint.name} at step {state.steps_done}")
    elif store:
        store.reset_metrics()

    logger.info("=" * 60)
    logger.info(f"PRETRAINING: paradigm={cfg.schedule.paradigm}, {len(plan)} steps, "
                f"stages={[s.name for s in stages]}")
    logger.info("=" * 60)
    if store:
        store.mark_status(RunStatus.IN_PROGRESS, current_step=state.steps_done)

    metrics = []
    progress = tqdm(range(state.steps_done, len(plan)), initial=state.steps_done, total=len(plan),
                    desc="pretrain", disable=not cfg.train.show_progress)
    previous_stage = plan[state.steps_done - 1].stage if state.steps_done > 0 else None

    for step in progress:
        item = plan[step]
        stage = stages[item.stage]
        if item.stage != previous_stage:
            state.bank.reset()
            logger.info(f"Stage {item.stage + 1}/{len(stages)} '{stage.name}': "
                        f"{item.stage_steps} steps, sources={stage.sources}")
            previous_stage = item.stage

        lr = lr_at(item.step_in_stage, stage, item.stage_steps)
        for group in state.optimizer.param_groups:
            group["lr"] = lr

        indices = [by_modality[item.modality][p] for p in item.positions]
        batch = make_batch(corpus, indices, vocab, cfg.corpus.text_len, item.epoch, dtype).to(device)
        output = total_loss(state.model, batch, weights, univlc, state.momentum, vocab, state.generator)

        if not torch.isfinite(output.total):
            message = f"non-finite loss at step {step} (stage '{stage.name}', {item.modality} batch)"
            logger.error(message)
            if store:
                store.mark_status(RunStatus.FAILED, error_message=message, current_step=step)
            raise TrainingError(message)

        state.optimizer.zero_grad(set_to_none=True)
        if output.total.requires_grad:
            output.total.backward()
            state.optimizer.step()
        momentum_step(registry, state.momentum)
        if output.keys is not None:
            enqueue(state.bank, *output.keys)
        state.steps_done = step + 1

        record = {
            "step": step,
            "stage": stage.name,
            "modality": item.modality,
            "loss_total": float(output.total.detach()),
            "loss_univlc": output.breakdown["univlc"],
            "loss_vlm": output.breakdown["vlm"],
            "loss_lm": output.breakdown["lm"],
            "lr": lr,
        }
        metrics.append(record)
        progress.set_postfix(loss=f"{record['loss_total']:.4f}", lr=f"{lr:.2e}")

        last = state.steps_done == len(plan)
        if store and (step % cfg.train.log_interval == 0 or last):
            store.append_metrics(record)
        if store and (state.steps_done % cfg.train.checkpoint_interval == 0 or last):
            store.write_checkpoint(state.steps_done, state.to_arrays())

    if store:
        store.mark_status(RunStatus.COMPLETED, current_step=state.steps_done)
    logger.info(f"Pretraining finished after {state.steps_done} steps")
    return TrainResult(state, metrics)


# ----------------------------------------------------------------------------
# QA fine-tuning
# ----------------------------------------------------------------------------

def finetune_qa(model: OmniVL, corpus: Corpus, pairs: Sequence[QAPair], vocab: Vocabulary,
                preset: str = "desk", text_len: int = 8, seed: int = 0,
                show_progress: bool = False) -> List[float]:
    """
    Fine-tune for question answering through the alignment + generation decoders.

    Uses the preset's AdamW learning rate, weight decay, batch size and epochs
    with linear decay to zero. Returns the per-step losses.
    """
    if preset not in FINETUNE_PRESETS:
        raise ConfigError(f"unknown fine-tuning preset '{preset}'")
    if not pairs:
        raise ArgumentError("no QA pairs to fine-tune on")
    recipe = FINETUNE_PRESETS[preset]
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device

    groups = {}
    for pair in pairs:
        groups.setdefault(corpus[pair.index].load().shape, []).append(pair)
    rng = np.random.default_rng(seed)
    batch_size = recipe["batch_size"]
    steps_per_epoch = sum(math.ceil(len(g) / batch_size) for g in groups.values())
    total_steps = recipe["epochs"] * steps_per_epoch
    schedule = StageConfig("qa", [], recipe["epochs"], peak_lr=recipe["lr"], warmup_steps=0, decay_rate=0.0)
    optimizer = build_optimizer(model, recipe["lr"], recipe["weight_decay"])

    logger.info(f"QA fine-tuning: {len(pairs)} pairs, preset '{preset}', {total_steps} steps")
    model.train()
    losses = []
    step = 0
    for _ in tqdm(range(recipe["epochs"]), desc="finetune-qa", disable=not show_progress):
        for key in sorted(groups):
            group = groups[key]
            order = rng.permutation(len(group))
            for start in range(0, len(group), batch_size):
                chunk = [group[i] for i in order[start:start + batch_size]]
                frames = stack_frames(corpus, [p.index for p in chunk], dtype).to(device)
                question = tokenize_batch([p.question for p in chunk], vocab, text_len).to(device)
                answer = tokenize_batch([p.answer for p in chunk], vocab, text_len, add_eos=True).to(device)

                for param_group in optimizer.param_groups:
                    param_group["lr"] = lr_at(step, schedule, total_steps)
                loss = qa_loss(model.encode_visual(frames), question, answer, model.align, model.gen, vocab)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite QA loss at step {step}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
                step += 1
    return losses
