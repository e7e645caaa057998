"""Full model: color shunt -> feature echelon -> pattern generations.

The network itself is episode-size agnostic; the episode spec is supplied
per forward call.  Construction is deterministic given a seed, which the
engine relies on for reproducible runs and for the gamma=0 equivalence
between plain training and distillation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
from torch import nn

from . import color_shunt
from .color_shunt import ColorSpace
from .echelon import EchelonConfig, FeatureEchelon
from .episodes import Episode, EpisodeSpec
from .pattern import PatternParams, RelationState, run_patterns


@dataclass(frozen=True)
class LearnerConfig:
    color_space: ColorSpace = ColorSpace.CIELAB
    echelon: EchelonConfig = EchelonConfig()
    pattern_depth: int = 5
    metric_hidden: int = 160

    def to_dict(self) -> dict:
        return {
            "color_space": self.color_space.value,
            "echelon": self.echelon.to_dict(),
            "pattern_depth": self.pattern_depth,
            "metric_hidden": self.metric_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        return cls(
            color_space=ColorSpace.parse(d["color_space"]),
            echelon=EchelonConfig.from_dict(d["echelon"]),
            pattern_depth=int(d["pattern_depth"]),
            metric_hidden=int(d["metric_hidden"]),
        )

    def student_variant(self, depth: int | None = None) -> "LearnerConfig":
        """Same learner without the attention block, optionally re-depthed."""
        return dataclasses.replace(
            self,
            echelon=dataclasses.replace(self.echelon, attention_enabled=False),
            pattern_depth=self.pattern_depth if depth is None else depth,
        )


class ColorLearner(nn.Module):
    """End-to-end few-shot learner over color-channel relations."""

    def __init__(self, config: LearnerConfig):
        super().__init__()
        self.config = config
        self.echelon = FeatureEchelon(config.echelon)
        self.patterns = PatternParams(
            config.echelon.embed_dim, config.pattern_depth, config.metric_hidden
        )

    def episode_planes(self, episode: Episode, dtype=None) -> tuple[torch.Tensor, ...]:
        """Shunt an episode's images into three (T, 1, H, W) tensors.

        The conversion itself runs in double precision; the downcast to the
        model's parameter dtype happens here, at the tensor boundary.
        """
        if dtype is None:
            dtype = next(self.parameters()).dtype
        images = episode.all_images  # (T, H, W, 3) uint8
        converted = color_shunt.convert(images, self.config.color_space)
        group = color_shunt.shunt(converted, self.config.color_space)
        return tuple(
            torch.as_tensor(p, dtype=dtype).unsqueeze(1) for p in group.planes
        )

    def forward(self, planes, spec: EpisodeSpec) -> list[RelationState]:
        embeddings = self.echelon(planes)
        return run_patterns(embeddings, spec, self.patterns)

    def forward_episode(self, episode: Episode, spec: EpisodeSpec,
                        dtype=None) -> list[RelationState]:
        return self.forward(self.episode_planes(episode, dtype), spec)

    def num_trainable_params(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def build_learner(config: LearnerConfig, seed: int) -> ColorLearner:
    """Construct a learner with seed-determined initial parameters."""
    torch.manual_seed(seed)
    return ColorLearner(config)


def parameter_fingerprint(model: nn.Module) -> str:
    """Hex digest over all parameter bytes, for frozen-weights assertions."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
