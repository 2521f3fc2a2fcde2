#!/usr/bin/env python3
"""
OmniVL model container and parameter registry.

The container wires the four networks of the architecture (visual encoder,
text encoder, alignment decoder, generation decoder) with the two projection
heads and the learnable contrastive temperature.
"""

import logging
from collections.abc import Mapping
from typing import Dict, Iterator, List, Set, Tuple

import torch
import torch.nn as nn

from alignment_decoder import build_alignment_decoder
from errors import ConfigError
from generation_decoder import build_generation_decoder
from objectives import ProjectionHead, Temperature
from text_encoder import TokenSequence, build_text_encoder
from visual_encoder import EncodedVisual, build_visual_encoder

logger = logging.getLogger(__name__)

# registry group -> top-level submodules of OmniVL
PARAMETER_GROUPS = {
    "ve": ("visual",),
    "te": ("text",),
    "ad": ("align",),
    "gd": ("gen",),
    "proj": ("vision_proj", "text_proj", "temperature"),
}

# live modules mirrored by the momentum encoders
MOMENTUM_MODULES = ("visual", "text", "vision_proj", "text_proj")


class ParameterRegistry(Mapping):
    """
    Flat name -> parameter view of a model, partitioned into the groups
    ve, te, ad, gd (encoders and decoders) and proj (projection heads).
    """

    def __init__(self, model: nn.Module):
        self._params: Dict[str, nn.Parameter] = {}
        self._group_of: Dict[str, str] = {}
        for group, modules in PARAMETER_GROUPS.items():
            for module_name in modules:
                module = getattr(model, module_name)
                for name, param in module.named_parameters(prefix=module_name):
                    if name in self._params:
                        raise ConfigError(f"duplicate parameter name '{name}'")
                    self._params[name] = param
                    self._group_of[name] = group

        unregistered = {name for name, _ in model.named_parameters()} - set(self._params)
        if unregistered:
            raise ConfigError(f"parameters without a group: {', '.join(sorted(unregistered))}")

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    @property
    def groups(self) -> List[str]:
        return list(PARAMETER_GROUPS)

    def group(self, group: str) -> Dict[str, nn.Parameter]:
        if group not in PARAMETER_GROUPS:
            raise ConfigError(f"unknown parameter group '{group}'")
        return {name: p for name, p in self._params.items() if self._group_of[name] == group}

    def group_of(self, name: str) -> str:
        return self._group_of[name]

    def touched(self) -> Set[str]:
        """Names of parameters holding a nonzero gradient."""
        return {name for name, p in self._params.items()
                if p.grad is not None and bool(p.grad.abs().sum() > 0)}

    def touched_groups(self) -> Set[str]:
        return {self._group_of[name] for name in self.touched()}


class OmniVL(nn.Module):
    """
    Unified image/video-language model.

    Args:
        model_cfg: ModelConfig with the network dimensions
        vocab_size: size of the shared text vocabulary
        tau_init: initial contrastive temperature
        temporal: build temporal sublayers in the visual encoder
    """

    def __init__(self, model_cfg, vocab_size: int, tau_init: float = 0.07, temporal: bool = True):
        super().__init__()
        self.model_cfg = model_cfg
        self.vocab_size = vocab_size
        self.visual = build_visual_encoder(model_cfg, temporal=temporal)
        self.text = build_text_encoder(model_cfg, vocab_size)
        self.vision_proj = ProjectionHead(model_cfg.dim, model_cfg.proj_dim)
        self.text_proj = ProjectionHead(model_cfg.dim, model_cfg.proj_dim)
        self.temperature = Temperature(tau_init)
        self.align = build_alignment_decoder(model_cfg, vocab_size)
        self.gen = build_generation_decoder(model_cfg, vocab_size)

        n_params = sum(p.numel() for p in self.parameters())
        logger.debug(f"OmniVL built: {n_params:,} parameters, vocab {vocab_size}")

    def encode_visual(self, frames: torch.Tensor) -> EncodedVisual:
        return self.visual(frames)

    def embed_visual(self, frames: torch.Tensor) -> Tuple[EncodedVisual, torch.Tensor]:
        """Encoded visual plus its unit-norm projection v."""
        encoded = self.visual(frames)
        return encoded, self.vision_proj(encoded.v_cls)

    def embed_text(self, seq: TokenSequence) -> torch.Tensor:
        """Unit-norm projection w of the [CLS] feature."""
        _, w_cls = self.text.encode_text(seq)
        return self.text_proj(w_cls)

    def registry(self) -> ParameterRegistry:
        return ParameterRegistry(self)

    def momentum_modules(self) -> Dict[str, nn.Module]:
        return {name: getattr(self, name) for name in MOMENTUM_MODULES}


def build_model(cfg, vocab_size: int) -> OmniVL:
    """Build the model from an ExperimentConfig."""
    return OmniVL(cfg.model, vocab_size, tau_init=cfg.objectives.tau_init)
