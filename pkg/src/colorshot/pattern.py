"""Iterative relation refinement across the three color channels.

Relations between the T images of an episode live in T x T matrices, one
per channel, refined over g generations.  One generation:

1. Each channel's matrix is updated by its similarity metric: pairwise
   |e_i - e_j| features pass through a small MLP to a logistic score
   s_ij in (0,1), and the new matrix is row-normalize(s * m_prev).
   Zeros in m_prev therefore stay zero, and every row sums to one.
2. The core channel's embeddings absorb the auxiliary channels through
   diagonal-masked aggregation: each auxiliary contributes
   (m_aux with zeroed diagonal) @ e_aux, the three blocks are fused by an
   affine map back to d dimensions, with a residual add.
3. Each auxiliary channel's embeddings are aggregated through the CORE
   channel's previous matrix (m_core @ e_aux), transformed, residual-added.

The query-rows x support-columns block of the final core matrix yields
class predictions: per query row, support columns are summed per class
and the argmax class is taken (ties to the lowest class index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .episodes import EpisodeSpec
from .errors import ConfigurationError, NumericError, ShapeError


@dataclass
class RelationState:
    """Per-channel relation matrices and embeddings at one generation."""

    m1: torch.Tensor
    m2: torch.Tensor
    m3: torch.Tensor
    e1: torch.Tensor
    e2: torch.Tensor
    e3: torch.Tensor
    generation: int

    @property
    def matrices(self):
        return self.m1, self.m2, self.m3

    @property
    def embeddings(self):
        return self.e1, self.e2, self.e3


def init_relations(spec: EpisodeSpec, dtype=torch.float32) -> torch.Tensor:
    """Initial T x T relation matrix shared by all three channels.

    Within the support block and within the query block the matrix is the
    identity pattern (1 on the diagonal, 0 off it); every support-query
    pair gets the uninformed prior 1/K.
    """
    if spec.ways < 1 or spec.shots < 1 or spec.queries < 1:
        raise ConfigurationError(f"invalid episode spec: {spec}")
    t = spec.total
    nk = spec.support_size
    is_support = np.arange(t) < nk
    same_block = is_support[:, None] == is_support[None, :]
    m = np.where(same_block, np.eye(t), 1.0 / spec.ways)
    return torch.as_tensor(m, dtype=dtype)


class SimMetric(nn.Module):
    """Parameterized similarity update for one channel's relation matrix.

    ``pair_logits`` maps embeddings (T, d) to a symmetric (T, T) logit
    matrix; ``forward`` squashes the logits to (0,1), multiplies into the
    previous matrix elementwise and row-normalizes.
    """

    def __init__(self, embed_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(embed_dim, hidden),
            nn.LeakyReLU(0.1),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.1),
            nn.Linear(hidden, 1),
        )

    def pair_logits(self, e: torch.Tensor) -> torch.Tensor:
        if e.dim() != 2:
            raise ShapeError(f"embeddings must be (T, d), got {tuple(e.shape)}")
        feats = (e[:, None, :] - e[None, :, :]).abs()  # (T, T, d), symmetric
        return self.net(feats).squeeze(-1)

    def forward(self, m_prev: torch.Tensor, e_prev: torch.Tensor) -> torch.Tensor:
        if m_prev.shape[0] != m_prev.shape[1] or m_prev.shape[0] != e_prev.shape[0]:
            raise ShapeError(
                f"matrix {tuple(m_prev.shape)} and embeddings {tuple(e_prev.shape)} disagree"
            )
        scores = torch.sigmoid(self.pair_logits(e_prev))
        m = scores * m_prev
        row_sums = m.sum(dim=1, keepdim=True)
        if (row_sums == 0).any():
            raise NumericError("relation matrix row sum is zero")
        return m / row_sums


def masked_aggregate(m: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Relation-weighted sum of the OTHER rows' embeddings: zero the
    diagonal of m, then multiply into e."""
    if m.shape[0] != m.shape[1] or m.shape[0] != e.shape[0]:
        raise ShapeError(f"matrix {tuple(m.shape)} and embeddings {tuple(e.shape)} disagree")
    off_diag = m * (1.0 - torch.eye(m.shape[0], dtype=m.dtype, device=m.device))
    return off_diag @ e


class GenerationParams(nn.Module):
    """All trainable pieces of one pattern generation.

    The fusion and auxiliary transforms start at zero so every generation
    begins as a pass-through of the previous embeddings (the residual
    branch) and mixing grows only where it lowers the loss; a gentle
    leaky slope keeps repeated application of the nonlinearity from
    crushing negative feature components across generations.  Both choices
    noticeably stabilize deep pattern stacks.
    """

    def __init__(self, embed_dim: int, metric_hidden: int):
        super().__init__()
        self.metrics = nn.ModuleList(SimMetric(embed_dim, metric_hidden) for _ in range(3))
        self.core_fusion = nn.Linear(3 * embed_dim, embed_dim)
        self.aux_transforms = nn.ModuleList(nn.Linear(embed_dim, embed_dim) for _ in range(2))
        self.act = nn.LeakyReLU(0.5)
        with torch.no_grad():
            self.core_fusion.weight.zero_()
            self.core_fusion.bias.zero_()
            for transform in self.aux_transforms:
                transform.weight.zero_()
                transform.bias.zero_()

    def core_update(self, e1_prev, agg2, agg3) -> torch.Tensor:
        if not (e1_prev.shape == agg2.shape == agg3.shape):
            raise ShapeError(
                f"core update inputs disagree: {tuple(e1_prev.shape)}, "
                f"{tuple(agg2.shape)}, {tuple(agg3.shape)}"
            )
        fused = self.core_fusion(torch.cat([e1_prev, agg2, agg3], dim=1))
        return self.act(fused + e1_prev)

    def aux_update(self, idx: int, m1_prev, e_aux_prev) -> torch.Tensor:
        if m1_prev.shape[0] != e_aux_prev.shape[0]:
            raise ShapeError(
                f"matrix {tuple(m1_prev.shape)} and embeddings {tuple(e_aux_prev.shape)} disagree"
            )
        mixed = self.aux_transforms[idx](m1_prev @ e_aux_prev)
        return self.act(mixed + e_aux_prev)


class PatternParams(nn.Module):
    """g generations of unshared relation/embedding update parameters."""

    def __init__(self, embed_dim: int, depth: int, metric_hidden: int = 160):
        super().__init__()
        if depth < 1:
            raise ConfigurationError(f"pattern depth must be >= 1, got {depth}")
        self.embed_dim = embed_dim
        self.depth = depth
        self.metric_hidden = metric_hidden
        self.generations = nn.ModuleList(
            GenerationParams(embed_dim, metric_hidden) for _ in range(depth)
        )

    def final_core_metric(self) -> SimMetric:
        return self.generations[-1].metrics[0]


def run_patterns(initial_embeddings, spec: EpisodeSpec, params: PatternParams) -> list[RelationState]:
    """Run all generations and return the g refined states in order."""
    e1, e2, e3 = initial_embeddings
    if e1.shape[0] != spec.total:
        raise ShapeError(
            f"embeddings have {e1.shape[0]} rows, episode size is {spec.total}"
        )
    m0 = init_relations(spec, dtype=e1.dtype).to(e1.device)
    state = RelationState(m0, m0.clone(), m0.clone(), e1, e2, e3, generation=0)
    states: list[RelationState] = []
    for n, gen in enumerate(params.generations, start=1):
        try:
            m1 = gen.metrics[0](state.m1, state.e1)
            m2 = gen.metrics[1](state.m2, state.e2)
            m3 = gen.metrics[2](state.m3, state.e3)
            new_e1 = gen.core_update(
                state.e1,
                masked_aggregate(state.m2, state.e2),
                masked_aggregate(state.m3, state.e3),
            )
            new_e2 = gen.aux_update(0, state.m1, state.e2)
            new_e3 = gen.aux_update(1, state.m1, state.e3)
        except (ShapeError, NumericError) as exc:
            raise type(exc)(f"generation {n}: {exc}") from exc
        state = RelationState(m1, m2, m3, new_e1, new_e2, new_e3, generation=n)
        states.append(state)
    return states


def predict_labels(m1_final, spec: EpisodeSpec) -> np.ndarray:
    """Class predictions for all K*Q queries from the final core matrix.

    Extracts the query-rows x support-columns block, sums the support
    columns of each class, and takes the argmax (ties resolve to the
    lowest class index).
    """
    m = np.asarray(m1_final.detach().cpu().numpy() if torch.is_tensor(m1_final) else m1_final)
    t, nk = spec.total, spec.support_size
    if m.shape != (t, t):
        raise ShapeError(f"expected a {t}x{t} relation matrix, got {m.shape}")
    block = m[nk:, :nk]  # (K*Q, N*K)
    class_scores = block.reshape(spec.query_size, spec.ways, spec.shots).sum(axis=2)
    return np.argmax(class_scores, axis=1)
