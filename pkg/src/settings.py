#!/usr/bin/env python3
"""
Settings Module for OmniVL Desk

Loads experiment configuration from JSON or YAML files layered over built-in
defaults, applies dotted ``key=value`` overrides and produces the resolved
snapshot and config hash stored with every run.

Keys starting with ``_`` are comments and are ignored. Any other unknown key is
rejected with a ConfigError naming the dotted key.
"""

import copy
import dataclasses
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union, get_args, get_origin, get_type_hints

import yaml

from errors import ConfigError

logger = logging.getLogger(__name__)


DEFAULT_IMAGE_TEMPLATES = [
    "a picture of a {class}",
    "a photo of a {class}",
    "an image showing a {class}",
]

DEFAULT_VIDEO_TEMPLATES = [
    "a video of a {class}",
    "a clip of a {class}",
    "footage of a {class}",
]

PARADIGMS = ("decoupled", "image_only", "video_only", "joint_scratch", "img2vid")
SCIENTIFIC = re.compile(r"^[-+]?\d+(\.\d*)?[eE][-+]?\d+$")


# Model presets. ``base`` is the ViT-B/16 + Bert-base layout.
MODEL_PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "image_size": 32,
        "patch_size": 16,
        "dim": 64,
        "heads": 4,
        "depth": 4,
        "text_depth": 4,
        "decoder_depth": 4,
        "proj_dim": 32,
        "max_frames": 8,
    },
    "base": {
        "image_size": 224,
        "patch_size": 16,
        "dim": 768,
        "heads": 12,
        "depth": 12,
        "text_depth": 12,
        "decoder_depth": 12,
        "proj_dim": 256,
        "max_frames": 8,
    },
}

# Downstream fine-tuning recipes. All use AdamW with linear decay.
FINETUNE_PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {"lr": 1e-3, "weight_decay": 0.05, "batch_size": 8, "epochs": 400},
    "coco_retrieval": {"lr": 1e-5, "weight_decay": 0.05, "batch_size": 512, "epochs": 10},
    "flickr30k": {"lr": 1e-5, "weight_decay": 0.05, "batch_size": 512, "epochs": 10},
    "coco_caption": {"lr": 1e-5, "weight_decay": 0.05, "batch_size": 512, "epochs": 10},
    "vqa": {"lr": 2e-5, "weight_decay": 0.05, "batch_size": 256, "epochs": 10},
    "msrvtt_retrieval": {"lr": 5e-6, "weight_decay": 0.05, "batch_size": 32, "epochs": 6},
    "didemo": {"lr": 1e-5, "weight_decay": 0.05, "batch_size": 32, "epochs": 6},
    "msrvtt_qa": {"lr": 5e-6, "weight_decay": 0.05, "batch_size": 32, "epochs": 10},
    "msvd_qa": {"lr": 1e-5, "weight_decay": 0.05, "batch_size": 32, "epochs": 10},
    "youcook2": {"lr": 1e-5, "weight_decay": 0.05, "batch_size": 32, "epochs": 10},
}


@dataclass
class SynthConfig:
    """Procedural corpus parameters"""
    n_classes: int = 8
    n_per_class: int = 8
    image_size: int = 32
    video_T: int = 4
    video_fraction: float = 0.0
    held_out_per_class: int = 0
    seed: int = 0


@dataclass
class CorpusConfig:
    """Corpus source and text settings"""
    manifest: Optional[str] = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    text_len: int = 16
    group_identical_captions: bool = False
    exclude_label_data: bool = False
    template_cycling: bool = False
    image_templates: List[str] = field(default_factory=lambda: list(DEFAULT_IMAGE_TEMPLATES))
    video_templates: List[str] = field(default_factory=lambda: list(DEFAULT_VIDEO_TEMPLATES))


@dataclass
class ModelConfig:
    """Architecture sizes (desk preset by default)"""
    preset: str = "desk"
    image_size: int = 32
    channels: int = 3
    patch_size: int = 16
    tubelet: int = 1
    dim: int = 64
    heads: int = 4
    depth: int = 4
    text_depth: int = 4
    decoder_depth: int = 4
    mlp_ratio: float = 4.0
    max_frames: int = 8
    proj_dim: int = 32
    max_text_len: int = 32


@dataclass
class ObjectiveConfig:
    """Loss weights, memory bank and momentum settings"""
    bank_size: int = 1024
    momentum: float = 0.995
    tau_init: float = 0.07
    lambda_univlc: float = 1.0
    lambda_vlm: float = 1.0
    lambda_lm: float = 1.0
    normalize_positives: bool = True
    contrastive_mode: str = "univlc"


@dataclass
class StageConfig:
    """One pretraining stage"""
    name: str = "stage"
    sources: List[str] = field(default_factory=lambda: ["image"])
    epochs: int = 1
    batch_image: int = 16
    batch_video: int = 8
    peak_lr: float = 3e-4
    warmup_steps: int = 10
    decay_rate: float = 0.85


@dataclass
class ScheduleConfig:
    """Stage layout. ``stages`` overrides the paradigm-derived layout when non-empty."""
    paradigm: str = "decoupled"
    image_epochs: int = 20
    joint_epochs: int = 10
    image_lr: float = 3e-4
    joint_lr: float = 8e-5
    warmup_steps: int = 10
    decay_rate: float = 0.85
    batch_image: int = 16
    batch_video: int = 8
    budget_steps: Optional[int] = None
    stages: List[StageConfig] = field(default_factory=list)


@dataclass
class TrainConfig:
    """Optimizer and bookkeeping"""
    device: str = "cpu"
    dtype: str = "float32"
    weight_decay: float = 0.05
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    log_interval: int = 10
    checkpoint_interval: int = 100
    keep_checkpoints: int = 5
    show_progress: bool = True


@dataclass
class EvalConfig:
    """Downstream evaluation settings"""
    k: int = 128
    max_len: int = 20
    beam: int = 1
    caption_prefix: str = "a picture of"
    finetune_preset: str = "desk"
    probe_C: float = 0.316
    probe_max_iter: int = 1000
    ablation_seeds: List[int] = field(default_factory=lambda: [0])


@dataclass
class ExperimentConfig:
    """Top-level experiment configuration"""
    seed: int = 0
    log_level: str = "INFO"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _strip_comments(data: Any) -> Any:
    """Drop ``_``-prefixed comment keys at every level."""
    if isinstance(data, dict):
        return {k: _strip_comments(v) for k, v in data.items() if not str(k).startswith("_")}
    if isinstance(data, list):
        return [_strip_comments(v) for v in data]
    return data


def _is_dataclass_type(tp: Any) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _build(cls, data: Dict[str, Any], prefix: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix or 'config'}' must be a mapping, got {type(data).__name__}")

    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}

    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"unknown config key '{dotted}'")

        tp = hints[key]
        if _is_dataclass_type(tp):
            kwargs[key] = _build(tp, value, dotted)
        elif get_origin(tp) in (list, List) and get_args(tp) and _is_dataclass_type(get_args(tp)[0]):
            if not isinstance(value, list):
                raise ConfigError(f"'{dotted}' must be a list")
            item_type = get_args(tp)[0]
            kwargs[key] = [_build(item_type, item, f"{dotted}[{i}]") for i, item in enumerate(value)]
        else:
            kwargs[key] = value

    return cls(**kwargs)


def _set_dotted(raw: Dict[str, Any], dotted: str, value: Any):
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot override '{dotted}': '{part}' is not a section")
        node = child
    node[parts[-1]] = value


def parse_override(text: str):
    """Parse one ``a.b=value`` override. The value is read as YAML."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like key=value")
    key, raw_value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override '{text}' has an empty key")
    try:
        value = yaml.safe_load(raw_value)
    except yaml.YAMLError as e:
        raise ConfigError(f"override '{key}': cannot parse value '{raw_value}': {e}")
    # YAML 1.1 reads 1e-4 as a string
    if isinstance(value, str) and SCIENTIFIC.match(value):
        value = float(value)
    return key, value


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a JSON or YAML config file into a dict with comments stripped."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            if path.suffix.lower() in (".yaml", ".yml"):
                data = yaml.safe_load(f) or {}
            else:
                data = json.load(f)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config file {path}: {e}")

    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return _strip_comments(data)


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    Load an experiment configuration.

    Args:
        path: JSON/YAML config file, or None for built-in defaults
        overrides: dotted ``key=value`` strings applied after the file

    Returns:
        Resolved ExperimentConfig
    """
    raw: Dict[str, Any] = read_config_file(path) if path else {}
    raw = copy.deepcopy(raw)

    for text in overrides:
        key, value = parse_override(text)
        _set_dotted(raw, key, value)

    # Presets fill model sizes first; explicit keys win.
    model_raw = raw.get("model", {})
    if isinstance(model_raw, dict):
        preset = model_raw.get("preset", "desk")
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset 'model.preset={preset}' "
                              f"(valid: {', '.join(MODEL_PRESETS)})")
        raw["model"] = {**MODEL_PRESETS[preset], **model_raw}

    cfg = _build(ExperimentConfig, raw)

    env_level = os.getenv("OMNIVL_LOG_LEVEL")
    if env_level:
        cfg.log_level = env_level.upper()
    env_device = os.getenv("OMNIVL_DEVICE")
    if env_device:
        cfg.train.device = env_device

    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig):
    """Reject values no module can run with."""
    if cfg.schedule.paradigm not in PARADIGMS:
        raise ConfigError(f"schedule.paradigm must be one of {', '.join(PARADIGMS)}, "
                          f"got '{cfg.schedule.paradigm}'")
    if cfg.objectives.contrastive_mode not in ("univlc", "vanilla"):
        raise ConfigError("objectives.contrastive_mode must be 'univlc' or 'vanilla'")
    if not 0.0 <= cfg.objectives.momentum < 1.0:
        raise ConfigError("objectives.momentum must lie in [0, 1)")
    if cfg.objectives.tau_init <= 0:
        raise ConfigError("objectives.tau_init must be positive")
    for name in ("lambda_univlc", "lambda_vlm", "lambda_lm"):
        if getattr(cfg.objectives, name) < 0:
            raise ConfigError(f"objectives.{name} must be nonnegative")
    if cfg.model.dim % cfg.model.heads != 0:
        raise ConfigError("model.dim must be divisible by model.heads")
    if cfg.model.image_size % cfg.model.patch_size != 0:
        raise ConfigError("model.image_size must be divisible by model.patch_size")
    if cfg.corpus.text_len < 2:
        raise ConfigError("corpus.text_len must be at least 2")
    if cfg.eval.finetune_preset not in FINETUNE_PRESETS:
        raise ConfigError(f"unknown eval.finetune_preset '{cfg.eval.finetune_preset}'")
    for stage in cfg.schedule.stages:
        for source in stage.sources:
            if source not in ("image", "video"):
                raise ConfigError(f"stage '{stage.name}' has unknown source '{source}'")


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the configuration."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_snapshot(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Write the resolved configuration as JSON; loading it reproduces the run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
    return path
