import numpy as np
import pytest
import torch

from colorshot.echelon import (
    CrossChannelAttention,
    EchelonConfig,
    FeatureEchelon,
    count_params,
)
from colorshot.errors import NumericError, ShapeError

TINY = EchelonConfig(stage_widths=(4, 8, 8, 8), embed_dim=8, attention_dim=4)


def planes(t=4, hw=8, seed=0):
    torch.manual_seed(seed)
    return tuple(torch.randn(t, 1, hw, hw) for _ in range(3))


class TestBranchShapes:
    def test_84_input_gives_5x5_maps(self):
        torch.manual_seed(0)
        echelon = FeatureEchelon(EchelonConfig())
        maps = echelon.feature_maps(tuple(torch.randn(2, 1, 84, 84) for _ in range(3)))
        for m in maps:
            assert m.shape == (2, 384, 5, 5)

    def test_tiny_input_survives_pooling(self):
        torch.manual_seed(0)
        echelon = FeatureEchelon(TINY)
        maps = echelon.feature_maps(planes(t=3, hw=8))
        for m in maps:
            assert m.shape == (3, 8, 1, 1)

    def test_zero_input_zero_bias_gives_zero_maps(self):
        torch.manual_seed(0)
        echelon = FeatureEchelon(TINY)
        with torch.no_grad():
            for p in echelon.parameters():
                if p.dim() == 1:  # conv/norm biases and norm scales
                    if p is not None:
                        p.zero_()
            # norm scale back to one so zeros stay zeros without bias shifts
            for branch in echelon.branches:
                for stage in branch.stages:
                    stage.norm.weight.fill_(1.0)
        echelon.eval()
        maps = echelon.feature_maps(tuple(torch.zeros(2, 1, 8, 8) for _ in range(3)))
        for m in maps:
            torch.testing.assert_close(m, torch.zeros_like(m))

    def test_branches_differ_when_unshared(self):
        torch.manual_seed(1)
        echelon = FeatureEchelon(TINY)
        x = torch.randn(2, 1, 8, 8)
        maps = echelon.feature_maps((x, x, x))
        assert not torch.allclose(maps[0], maps[1])

    def test_branches_match_when_shared(self):
        torch.manual_seed(1)
        cfg = EchelonConfig(stage_widths=(4, 8, 8, 8), embed_dim=8,
                            attention_dim=4, share_branch_params=True)
        echelon = FeatureEchelon(cfg)
        x = torch.randn(2, 1, 8, 8)
        maps = echelon.feature_maps((x, x, x))
        torch.testing.assert_close(maps[0], maps[1])
        torch.testing.assert_close(maps[1], maps[2])

    def test_shape_mismatch_rejected(self):
        echelon = FeatureEchelon(TINY)
        bad = (torch.randn(2, 1, 8, 8), torch.randn(2, 1, 8, 8), torch.randn(2, 1, 4, 4))
        with pytest.raises(ShapeError):
            echelon.feature_maps(bad)

    def test_nonfinite_activation_names_stage(self):
        torch.manual_seed(0)
        echelon = FeatureEchelon(TINY)
        x = torch.full((1, 1, 8, 8), torch.inf)
        with pytest.raises(NumericError, match="stage 1"):
            echelon.feature_maps((x, x, x))

    def test_forward_determinism(self):
        torch.manual_seed(2)
        echelon = FeatureEchelon(TINY)
        echelon.eval()
        p = planes()
        a = echelon(p)
        b = echelon(tuple(x.clone() for x in p))
        for ea, eb in zip(a, b):
            assert torch.equal(ea, eb)


class TestAttention:
    def test_output_shape_and_finite(self):
        torch.manual_seed(3)
        attn = CrossChannelAttention(8, 4)
        maps = tuple(torch.randn(3, 8, 2, 2) for _ in range(3))
        out = attn(maps)
        for o, m in zip(out, maps):
            assert o.shape == m.shape
            assert torch.isfinite(o).all()

    def test_forced_uniform_mean_of_other_values(self):
        torch.manual_seed(4)
        attn = CrossChannelAttention(8, 4)
        maps = tuple(torch.randn(2, 8, 2, 2) for _ in range(3))
        out = attn(maps, force_uniform=True)
        for i in range(3):
            others = torch.cat([maps[j] for j in range(3) if j != i], dim=0)
            v = attn.value[i](others).flatten(2).transpose(1, 2)
            v = torch.cat(v.chunk(2, dim=0), dim=1)
            mean_v = v.mean(dim=1, keepdim=True).expand(2, 4, attn.attn_dim)
            mean_v = mean_v.transpose(1, 2).reshape(2, attn.attn_dim, 2, 2)
            want = maps[i] + attn.out[i](mean_v)
            torch.testing.assert_close(out[i], want)

    def test_identical_inputs_identical_outputs_when_shared(self):
        torch.manual_seed(5)
        attn = CrossChannelAttention(8, 4, shared=True)
        x = torch.randn(2, 8, 3, 3)
        out = attn((x, x, x))
        torch.testing.assert_close(out[0], out[1])
        torch.testing.assert_close(out[1], out[2])

    def test_shape_mismatch_rejected(self):
        attn = CrossChannelAttention(8, 4)
        with pytest.raises(ShapeError):
            attn((torch.randn(2, 8, 2, 2), torch.randn(2, 8, 2, 2),
                  torch.randn(2, 8, 3, 3)))


class TestProjection:
    def test_embedding_shape(self):
        torch.manual_seed(6)
        echelon = FeatureEchelon(EchelonConfig())
        emb = echelon(tuple(torch.randn(4, 1, 84, 84) for _ in range(3)))
        for e in emb:
            assert e.shape == (4, 128)

    def test_constant_map_projects_to_affine_of_constant(self):
        torch.manual_seed(7)
        echelon = FeatureEchelon(TINY)
        const = torch.full((2, 8, 3, 3), 1.7)
        out = echelon.projection((const, const, const))
        for i, e in enumerate(out):
            want = echelon.projection.linear[i](torch.full((2, 8), 1.7))
            torch.testing.assert_close(e, want)


class TestCountParams:
    def test_default_config_near_anchor(self):
        n = count_params(EchelonConfig(), 5)
        assert abs(n - 4.193e6) <= 0.25 * 4.193e6

    def test_affine_in_depth(self):
        counts = [count_params(EchelonConfig(), g) for g in (3, 4, 5, 6)]
        increments = np.diff(counts)
        assert len(set(increments)) == 1
        assert abs(increments[0] - 0.253e6) <= 0.25 * 0.253e6

    def test_student_strictly_smaller(self):
        teacher = count_params(EchelonConfig(), 5)
        student = count_params(EchelonConfig(attention_enabled=False), 5)
        assert student < teacher

    def test_student_never_builds_attention(self):
        torch.manual_seed(8)
        echelon = FeatureEchelon(EchelonConfig(
            stage_widths=(4, 8, 8, 8), embed_dim=8, attention_enabled=False))
        assert echelon.attention is None
        names = [n for n, _ in echelon.named_parameters()]
        assert not any("attention" in n for n in names)

    def test_bad_config_rejected(self):
        with pytest.raises(ShapeError):
            EchelonConfig(stage_widths=(4, 8, 8))
        with pytest.raises(ShapeError):
            count_params(EchelonConfig(), 0)
