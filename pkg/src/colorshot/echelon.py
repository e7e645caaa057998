"""Grouped per-channel feature extraction.

Each of the three color planes runs through its own four-stage
convolutional branch (conv 3x3 -> batch norm -> leaky ReLU -> 2x2 max
pool, halving the spatial size per stage: 84 -> 42 -> 21 -> 10 -> 5).
The stage-4 maps then exchange information through a single-head
cross-channel attention block (query from the channel itself, keys and
values from the union of the other two channels) and are projected to one
embedding vector per image and channel via global average pooling plus an
affine map.

The student variant disables the attention block entirely: when
``attention_enabled`` is false the block is never constructed, so the
forward path cannot touch attention parameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .errors import NumericError, ShapeError

STAGE_NAMES = ("sentinels", "integrators", "abstractors", "directors")


class EmbeddingTriple(NamedTuple):
    """One (T, d) embedding matrix per color channel; e1 is the core."""

    e1: torch.Tensor
    e2: torch.Tensor
    e3: torch.Tensor


@dataclass(frozen=True)
class EchelonConfig:
    stage_widths: tuple[int, int, int, int] = (48, 96, 192, 384)
    embed_dim: int = 128
    attention_enabled: bool = True
    share_branch_params: bool = False
    attention_dim: int = 64

    def __post_init__(self):
        if len(self.stage_widths) != 4 or any(w < 1 for w in self.stage_widths):
            raise ShapeError(f"stage_widths must be 4 positive integers, got {self.stage_widths}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EchelonConfig":
        d = dict(d)
        d["stage_widths"] = tuple(d["stage_widths"])
        return cls(**d)


class _Stage(nn.Module):
    """conv 3x3 -> batch norm -> leaky ReLU -> 2x2 max pool."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = nn.BatchNorm2d(out_ch)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, x):
        x = self.act(self.norm(self.conv(x)))
        # Pooling is skipped once a dimension cannot halve (tiny inputs).
        if x.shape[-1] >= 2 and x.shape[-2] >= 2:
            x = nn.functional.max_pool2d(x, 2)
        return x


class EchelonBranch(nn.Module):
    """The four-stage extractor for one color plane."""

    def __init__(self, widths: tuple[int, int, int, int]):
        super().__init__()
        chans = (1, *widths)
        self.stages = nn.ModuleList(_Stage(chans[i], chans[i + 1]) for i in range(4))

    def forward(self, x):
        for idx, stage in enumerate(self.stages):
            x = stage(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activation after stage {idx + 1} ({STAGE_NAMES[idx]})")
        return x


class CrossChannelAttention(nn.Module):
    """Single-head scaled dot-product attention across channel groups.

    For channel i the query comes from its own maps; keys and values come
    from the spatial positions of the other two channels' maps stacked
    together.  1x1 convolutions provide the query/key/value transforms and
    a 1x1 output transform maps back to the feature width before the
    residual add, so output shape always equals input shape.
    """

    def __init__(self, channels: int, attn_dim: int, shared: bool = False):
        super().__init__()
        self.attn_dim = attn_dim
        n = 1 if shared else 3
        self.query = nn.ModuleList(nn.Conv2d(channels, attn_dim, 1) for _ in range(n))
        self.key = nn.ModuleList(nn.Conv2d(channels, attn_dim, 1) for _ in range(n))
        self.value = nn.ModuleList(nn.Conv2d(channels, attn_dim, 1) for _ in range(n))
        self.out = nn.ModuleList(nn.Conv2d(attn_dim, channels, 1) for _ in range(n))
        self.shared = shared

    def _branch(self, module_list: nn.ModuleList, idx: int) -> nn.Module:
        return module_list[0 if self.shared else idx]

    def forward(self, maps: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
                force_uniform: bool = False):
        if not (maps[0].shape == maps[1].shape == maps[2].shape):
            raise ShapeError(f"attention inputs disagree in shape: {[tuple(m.shape) for m in maps]}")
        t, c, h, w = maps[0].shape
        outputs = []
        for i in range(3):
            others = torch.cat([maps[j] for j in range(3) if j != i], dim=0)  # (2T, C, H, W)
            q = self._branch(self.query, i)(maps[i]).flatten(2).transpose(1, 2)  # (T, S, dk)
            k = self._branch(self.key, i)(others).flatten(2).transpose(1, 2)
            k = torch.cat(k.chunk(2, dim=0), dim=1)  # (T, 2S, dk)
            v = self._branch(self.value, i)(others).flatten(2).transpose(1, 2)
            v = torch.cat(v.chunk(2, dim=0), dim=1)  # (T, 2S, dv)
            if force_uniform:
                attended = v.mean(dim=1, keepdim=True).expand(t, q.shape[1], self.attn_dim)
            else:
                weights = torch.softmax(q @ k.transpose(1, 2) / self.attn_dim**0.5, dim=-1)
                attended = weights @ v  # (T, S, dv)
            attended = attended.transpose(1, 2).reshape(t, self.attn_dim, h, w)
            outputs.append(maps[i] + self._branch(self.out, i)(attended))
        return tuple(outputs)


class Projection(nn.Module):
    """Global average pool followed by an affine map to the embed dim."""

    def __init__(self, channels: int, embed_dim: int, shared: bool = False):
        super().__init__()
        n = 1 if shared else 3
        self.linear = nn.ModuleList(nn.Linear(channels, embed_dim) for _ in range(n))
        self.shared = shared

    def forward(self, maps: tuple[torch.Tensor, torch.Tensor, torch.Tensor]) -> EmbeddingTriple:
        out = []
        for i, m in enumerate(maps):
            pooled = m.mean(dim=(2, 3))
            out.append(self.linear[0 if self.shared else i](pooled))
        return EmbeddingTriple(*out)


class FeatureEchelon(nn.Module):
    """Three-branch extractor producing per-channel embeddings.

    ``forward`` returns the three (T, d) embedding matrices; ``feature_maps``
    exposes the stage-4 maps for tests and for attention-specific checks.
    """

    def __init__(self, config: EchelonConfig):
        super().__init__()
        self.config = config
        n = 1 if config.share_branch_params else 3
        self.branches = nn.ModuleList(EchelonBranch(config.stage_widths) for _ in range(n))
        if config.attention_enabled:
            self.attention = CrossChannelAttention(
                config.stage_widths[3], config.attention_dim, config.share_branch_params
            )
        else:
            self.attention = None
        self.projection = Projection(
            config.stage_widths[3], config.embed_dim, config.share_branch_params
        )

    def _expect_planes(self, planes):
        if len(planes) != 3:
            raise ShapeError(f"expected 3 channel planes, got {len(planes)}")
        if not (planes[0].shape == planes[1].shape == planes[2].shape):
            raise ShapeError(f"channel planes disagree in shape: {[tuple(p.shape) for p in planes]}")

    def feature_maps(self, planes) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Run the three branches; input planes are (T, 1, H, W) tensors."""
        self._expect_planes(planes)
        shared = self.config.share_branch_params
        return tuple(self.branches[0 if shared else i](planes[i]) for i in range(3))

    def forward(self, planes, force_uniform_attention: bool = False):
        maps = self.feature_maps(planes)
        if self.attention is not None:
            maps = self.attention(maps, force_uniform=force_uniform_attention)
        return self.projection(maps)


def count_params(config: EchelonConfig, g: int) -> int:
    """Trainable parameter count of the extractor plus g pattern generations."""
    from .pattern import PatternParams

    if g < 1:
        raise ShapeError(f"pattern depth must be >= 1, got {g}")
    echelon = FeatureEchelon(config)
    patterns = PatternParams(config.embed_dim, g)
    return sum(p.numel() for p in echelon.parameters() if p.requires_grad) + sum(
        p.numel() for p in patterns.parameters() if p.requires_grad
    )
