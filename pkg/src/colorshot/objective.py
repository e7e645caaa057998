"""Training objectives.

Per generation, each channel's relation matrix yields a classification
loss: a query row's support entries are summed per class (via support
one-hots) to give K class scores, which go through softmax cross-entropy
against the query's label, summed over queries.  A feature-similarity
loss does the same with negated pairwise L1 distances of the core
embeddings standing in for relation scores.  The total weighs the core
channel at 1, the auxiliaries at lambda, and the similarity term at beta,
summed over generations then over the episode batch in that order.

The distillation term compares teacher and student query-row similarity
distributions (from each model's final core similarity transform applied
to its final core embeddings) with a KL divergence, teacher || student,
scaled by gamma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .episodes import EpisodeSpec
from .errors import ShapeError

DEFAULT_LAMBDA = 0.1
DEFAULT_BETA = 0.1
DEFAULT_GAMMA = 1e-4

# Floor applied to probabilities before any logarithm.
PROB_FLOOR = 1e-12


@dataclass
class GenerationLosses:
    """Loss components of one generation on one episode."""

    l1: torch.Tensor
    l2: torch.Tensor
    l3: torch.Tensor
    le: torch.Tensor


@dataclass
class LossTerms:
    """Detached per-generation components plus the weighted total.

    ``per_generation[n][b]`` holds the four components of generation n+1 on
    batch episode b; ``recombine`` re-sums them in the same order and
    precision the training loss used, so the stored total is checkable.
    """

    per_generation: list[list[dict]]
    total: float
    lam: float = DEFAULT_LAMBDA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA

    @classmethod
    def from_components(cls, batch_terms: list[list["GenerationLosses"]],
                        lam: float, beta: float, total: torch.Tensor,
                        gamma: float = DEFAULT_GAMMA) -> "LossTerms":
        per_generation = [
            [
                {
                    "l1": float(batch_terms[b][n].l1.item()),
                    "l2": float(batch_terms[b][n].l2.item()),
                    "l3": float(batch_terms[b][n].l3.item()),
                    "le": float(batch_terms[b][n].le.item()),
                }
                for b in range(len(batch_terms))
            ]
            for n in range(len(batch_terms[0]))
        ]
        return cls(per_generation, float(total.item()), lam, beta, gamma)

    def recombine(self, dtype=np.float32):
        """Fixed-order weighted sum of the stored components."""
        lam, beta = dtype(self.lam), dtype(self.beta)
        total = None
        for gen in self.per_generation:
            for b in gen:
                contrib = (dtype(b["l1"]) + lam * (dtype(b["l2"]) + dtype(b["l3"]))
                           + beta * dtype(b["le"]))
                total = contrib if total is None else total + contrib
        return total


def _one_hot_support(support_labels: torch.Tensor, ways: int, dtype, device) -> torch.Tensor:
    return torch.nn.functional.one_hot(support_labels, ways).to(dtype=dtype, device=device)


def _check_labels(spec: EpisodeSpec, support_labels, query_labels):
    if support_labels.shape[0] != spec.support_size:
        raise ShapeError(
            f"expected {spec.support_size} support labels, got {support_labels.shape[0]}"
        )
    if query_labels.shape[0] != spec.query_size:
        raise ShapeError(
            f"expected {spec.query_size} query labels, got {query_labels.shape[0]}"
        )


def _score_cross_entropy(scores: torch.Tensor, query_labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy per query row, summed (not averaged)."""
    log_probs = torch.log_softmax(scores, dim=1)
    picked = log_probs.gather(1, query_labels.view(-1, 1)).squeeze(1)
    return -picked.sum()


def matrix_class_loss(m: torch.Tensor, support_labels: torch.Tensor,
                      query_labels: torch.Tensor, spec: EpisodeSpec) -> torch.Tensor:
    """Classification loss of one channel's relation matrix."""
    t, nk = spec.total, spec.support_size
    if m.shape != (t, t):
        raise ShapeError(f"expected a {t}x{t} relation matrix, got {tuple(m.shape)}")
    _check_labels(spec, support_labels, query_labels)
    onehot = _one_hot_support(support_labels, spec.ways, m.dtype, m.device)
    scores = m[nk:, :nk] @ onehot  # (K*Q, K)
    return _score_cross_entropy(scores, query_labels)


def embedding_sim_loss(e1: torch.Tensor, support_labels: torch.Tensor,
                       query_labels: torch.Tensor, spec: EpisodeSpec) -> torch.Tensor:
    """Classification loss from negated pairwise L1 embedding distances."""
    t, nk = spec.total, spec.support_size
    if e1.shape[0] != t:
        raise ShapeError(f"expected {t} embedding rows, got {e1.shape[0]}")
    _check_labels(spec, support_labels, query_labels)
    sim = -(e1[:, None, :] - e1[None, :, :]).abs().sum(-1)  # (T, T)
    onehot = _one_hot_support(support_labels, spec.ways, e1.dtype, e1.device)
    scores = sim[nk:, :nk] @ onehot
    return _score_cross_entropy(scores, query_labels)


def total_loss(batch_terms: list[list[GenerationLosses]],
               lam: float = DEFAULT_LAMBDA, beta: float = DEFAULT_BETA) -> torch.Tensor:
    """Weighted sum over generations (outer) and batch episodes (inner).

    The summation order is fixed so logged components recombine to the
    total exactly.
    """
    if not batch_terms or not batch_terms[0]:
        raise ShapeError("need at least one episode with at least one generation of losses")
    depth = len(batch_terms[0])
    total = None
    for n in range(depth):
        for terms in batch_terms:
            g = terms[n]
            contrib = g.l1 + lam * (g.l2 + g.l3) + beta * g.le
            total = contrib if total is None else total + contrib
    return total


def distill_kl(student_e1_final: torch.Tensor, teacher_e1_final: torch.Tensor,
               student_sim, teacher_sim, gamma: float, spec: EpisodeSpec) -> torch.Tensor:
    """Color-knowledge transfer term.

    Both final core embeddings pass through their model's final similarity
    transform; query rows are softmaxed over support columns and compared
    with KL(teacher || student), summed over queries and scaled by gamma.
    Probabilities are floored before the logarithms.
    """
    t, nk = spec.total, spec.support_size
    if student_e1_final.shape[0] != t or teacher_e1_final.shape[0] != t:
        raise ShapeError("embedding row counts disagree with the episode size")
    if gamma == 0.0:
        return torch.zeros((), dtype=student_e1_final.dtype, device=student_e1_final.device)
    s_logits = student_sim.pair_logits(student_e1_final)[nk:, :nk]
    t_logits = teacher_sim.pair_logits(teacher_e1_final)[nk:, :nk]
    s_prob = torch.softmax(s_logits, dim=1).clamp_min(PROB_FLOOR)
    t_prob = torch.softmax(t_logits, dim=1).clamp_min(PROB_FLOOR)
    kl = (t_prob * (t_prob.log() - s_prob.log())).sum()
    return gamma * kl
