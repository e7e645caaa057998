import math

import numpy as np
import pytest
import torch

from colorshot.episodes import EpisodeSpec
from colorshot.errors import ShapeError
from colorshot.objective import (
    GenerationLosses,
    LossTerms,
    distill_kl,
    embedding_sim_loss,
    matrix_class_loss,
    total_loss,
)
from colorshot.pattern import SimMetric, init_relations


def labels(spec):
    support = torch.arange(spec.ways).repeat_interleave(spec.shots)
    query = torch.arange(spec.ways).repeat_interleave(spec.queries)
    return support, query


class TestMatrixClassLoss:
    def test_uniform_row_gives_ln_k_per_query(self):
        spec = EpisodeSpec(ways=5, shots=1, queries=15)
        m = init_relations(spec, dtype=torch.float64)
        support, query = labels(spec)
        # all support entries are 1/K: equal scores -> uniform softmax
        loss = matrix_class_loss(m, support, query, spec)
        assert loss.item() == pytest.approx(75 * math.log(5), rel=1e-12)

    def test_hand_computed_two_way(self):
        spec = EpisodeSpec(ways=2, shots=1, queries=1)
        m = torch.zeros(4, 4, dtype=torch.float64)
        m[2, 0], m[2, 1] = 0.9, 0.1   # query 0 (class 0)
        m[3, 0], m[3, 1] = 0.5, 0.5   # query 1 (class 1): uniform
        support, query = labels(spec)
        loss = matrix_class_loss(m, support, query, spec)
        want = -math.log(math.exp(0.9) / (math.exp(0.9) + math.exp(0.1))) + math.log(2)
        assert loss.item() == pytest.approx(want, rel=1e-12)
        assert -math.log(math.exp(0.9) / (math.exp(0.9) + math.exp(0.1))) == pytest.approx(
            0.3711, abs=1e-4
        )

    def test_multi_shot_sums_class_columns(self):
        spec = EpisodeSpec(ways=2, shots=2, queries=1)
        m = torch.zeros(6, 6, dtype=torch.float64)
        m[4, :4] = torch.tensor([0.4, 0.1, 0.2, 0.3])
        m[5, :4] = torch.tensor([0.4, 0.1, 0.2, 0.3])
        support, query = labels(spec)
        loss = matrix_class_loss(m, support, query, spec)
        # class scores are (0.5, 0.5) for both queries
        assert loss.item() == pytest.approx(2 * math.log(2), rel=1e-12)

    def test_query_order_invariance(self):
        spec = EpisodeSpec(ways=3, shots=1, queries=4)
        rng = np.random.default_rng(0)
        m = torch.tensor(rng.random((spec.total, spec.total)))
        support, query = labels(spec)
        base = matrix_class_loss(m, support, query, spec)
        perm = torch.tensor(rng.permutation(spec.query_size))
        m2 = m.clone()
        m2[spec.support_size:] = m[spec.support_size:][perm]
        permuted = matrix_class_loss(m2, support, query[perm], spec)
        assert permuted.item() == pytest.approx(base.item(), rel=1e-12)

    def test_label_shape_mismatch_rejected(self):
        spec = EpisodeSpec(ways=2, shots=1, queries=1)
        m = init_relations(spec)
        with pytest.raises(ShapeError):
            matrix_class_loss(m, torch.zeros(3, dtype=torch.long),
                              torch.zeros(2, dtype=torch.long), spec)


class TestEmbeddingSimLoss:
    def test_identical_embeddings_give_ln_k(self):
        spec = EpisodeSpec(ways=4, shots=1, queries=2)
        e = torch.ones(spec.total, 7, dtype=torch.float64)
        support, query = labels(spec)
        loss = embedding_sim_loss(e, support, query, spec)
        assert loss.item() == pytest.approx(8 * math.log(4), rel=1e-12)

    def test_hand_computed_separated_classes(self):
        spec = EpisodeSpec(ways=2, shots=1, queries=1)
        # query 0 coincides with support 0 and sits L1 distance 10 from
        # support 1; query 1 coincides with support 1, distance 10 from 0.
        e = torch.tensor([[0.0], [10.0], [0.0], [10.0]], dtype=torch.float64)
        support, query = labels(spec)
        loss = embedding_sim_loss(e, support, query, spec)
        per_query = -math.log(math.exp(0.0) / (math.exp(0.0) + math.exp(-10.0)))
        assert per_query == pytest.approx(4.54e-5, abs=1e-7)
        assert loss.item() == pytest.approx(2 * per_query, rel=1e-9)

    def test_feature_permutation_invariance(self):
        spec = EpisodeSpec(ways=2, shots=1, queries=2)
        rng = np.random.default_rng(1)
        e = torch.tensor(rng.normal(size=(spec.total, 6)))
        support, query = labels(spec)
        base = embedding_sim_loss(e, support, query, spec)
        perm = rng.permutation(6)
        shuffled = embedding_sim_loss(e[:, perm], support, query, spec)
        assert shuffled.item() == pytest.approx(base.item(), rel=1e-12)


class TestTotalLoss:
    def _terms(self, values):
        return [
            [GenerationLosses(*(torch.tensor(v, dtype=torch.float64) for v in gen))
             for gen in episode]
            for episode in values
        ]

    def test_weight_zeroing(self):
        terms = self._terms([[(1.0, 2.0, 3.0, 4.0), (5.0, 6.0, 7.0, 8.0)]])
        total = total_loss(terms, lam=0.0, beta=0.0)
        assert total.item() == pytest.approx(6.0, rel=0)

    def test_hand_computed(self):
        terms = self._terms([[(1.0, 2.0, 3.0, 4.0)]])
        assert total_loss(terms, lam=0.1, beta=0.1).item() == pytest.approx(1.9, rel=1e-12)

    def test_defaults_weighting(self):
        terms = self._terms([[(1.0, 1.0, 1.0, 1.0)]])
        assert total_loss(terms).item() == pytest.approx(1.0 + 0.1 * 2 + 0.1, rel=1e-12)

    def test_exact_recombination_fixed_order(self):
        rng = np.random.default_rng(2)
        values = [[tuple(rng.random(4)) for _ in range(5)] for _ in range(3)]
        terms = self._terms(values)
        total = total_loss(terms, lam=0.1, beta=0.1)
        manual = None
        for n in range(5):
            for b in range(3):
                l1, l2, l3, le = (torch.tensor(v, dtype=torch.float64) for v in values[b][n])
                contrib = l1 + 0.1 * (l2 + l3) + 0.1 * le
                manual = contrib if manual is None else manual + contrib
        assert total.item() == manual.item()  # bitwise: same order, same ops

    def test_linear_in_components(self):
        base = self._terms([[(1.0, 0.0, 0.0, 0.0)]])
        bumped = self._terms([[(1.0, 1.0, 1.0, 0.0)]])
        lam = 0.37
        delta = total_loss(bumped, lam=lam, beta=0.0) - total_loss(base, lam=lam, beta=0.0)
        assert delta.item() == pytest.approx(2 * lam, rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            total_loss([])

    def test_loss_terms_recombine_to_stored_total(self):
        rng = np.random.default_rng(3)
        values = [[tuple(rng.random(4)) for _ in range(4)] for _ in range(2)]
        terms_t = self._terms(values)
        total = total_loss(terms_t, lam=0.1, beta=0.1)
        record = LossTerms.from_components(terms_t, 0.1, 0.1, total)
        assert record.recombine(dtype=np.float64) == record.total
        assert all(
            v >= 0.0 for gen in record.per_generation for b in gen for v in b.values()
        )


class TestDistillKL:
    def _setup(self, seed=0, d=6):
        torch.manual_seed(seed)
        spec = EpisodeSpec(ways=2, shots=1, queries=2)
        student_sim = SimMetric(d, 8).double()
        teacher_sim = SimMetric(d, 8).double()
        e = torch.randn(spec.total, d, dtype=torch.float64)
        return spec, student_sim, teacher_sim, e

    def test_self_distillation_is_zero(self):
        spec, _, teacher_sim, e = self._setup()
        kl = distill_kl(e, e, teacher_sim, teacher_sim, gamma=1.0, spec=spec)
        assert abs(kl.item()) <= 1e-8

    def test_gamma_zero_is_exactly_zero(self):
        spec, student_sim, teacher_sim, e = self._setup(1)
        kl = distill_kl(e, torch.randn_like(e), student_sim, teacher_sim, 0.0, spec)
        assert kl.item() == 0.0

    def test_hand_computed_value(self):
        # Distributions (0.7, 0.3) vs (0.5, 0.5) per query row.
        want_per_row = 0.7 * math.log(0.7 / 0.5) + 0.3 * math.log(0.3 / 0.5)
        assert want_per_row == pytest.approx(0.0823, abs=1e-4)

        class FixedSim:
            def __init__(self, probs):
                self.logits = torch.log(torch.tensor(probs, dtype=torch.float64))

            def pair_logits(self, e):
                t = e.shape[0]
                out = torch.zeros(t, t, dtype=torch.float64)
                out[2:, :2] = self.logits
                return out

        spec = EpisodeSpec(ways=2, shots=1, queries=1)
        e = torch.zeros(4, 3, dtype=torch.float64)
        kl = distill_kl(e, e, FixedSim([[0.5, 0.5], [0.5, 0.5]]),
                        FixedSim([[0.7, 0.3], [0.7, 0.3]]), gamma=1.0, spec=spec)
        assert kl.item() == pytest.approx(2 * want_per_row, rel=1e-9)

    def test_nonnegative(self):
        for seed in range(5):
            spec, student_sim, teacher_sim, e = self._setup(seed)
            kl = distill_kl(e, torch.randn_like(e), student_sim, teacher_sim, 1.0, spec)
            assert kl.item() >= 0.0

    def test_gamma_scales_linearly(self):
        spec, student_sim, teacher_sim, e = self._setup(3)
        e2 = torch.randn_like(e)
        k1 = distill_kl(e, e2, student_sim, teacher_sim, 1.0, spec)
        k2 = distill_kl(e, e2, student_sim, teacher_sim, 0.25, spec)
        assert k2.item() == pytest.approx(0.25 * k1.item(), rel=1e-12)
