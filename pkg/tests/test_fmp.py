import numpy as np
import pytest

from fusionsam import fmp, numerics as nm
from fusionsam.errors import ConfigError, DimensionError


def rng(seed=0):
    return np.random.default_rng(seed)


def make_module(seed=0, dc=6, mode="attention"):
    return fmp.FusionModule(rng(seed), dc=dc, c_f=3, scale=4, mode=mode)


class TestCrossDomainFuse:
    def test_attention_rows_sum_to_one(self):
        g = rng(1)
        mod = make_module(1)
        t1 = nm.tensor(g.standard_normal((5, 6)))
        t2 = nm.tensor(g.standard_normal((5, 6)))
        mod.cross_domain_fuse(t1, t2)
        for attn in mod.inter.attention_maps():
            assert np.all(attn >= 0)
            assert np.max(np.abs(attn.sum(axis=1) - 1.0)) <= 1e-9

    def test_single_token_weight_is_exactly_one(self):
        g = rng(2)
        mod = make_module(2)
        t1 = nm.tensor(g.standard_normal((1, 6)))
        t2 = nm.tensor(g.standard_normal((1, 6)))
        mod.cross_domain_fuse(t1, t2)
        for attn in mod.inter.attention_maps():
            assert attn.shape == (1, 1)
            assert attn[0, 0] == 1.0

    def test_single_token_closed_form(self):
        # with a single token the attention output is exactly LN(V2) + Q1
        g = rng(3)
        mod = make_module(3)
        inter = mod.inter
        t1 = nm.tensor(g.standard_normal((1, 6)))
        t2 = nm.tensor(g.standard_normal((1, 6)))
        q1 = t1.data @ inter.wq1.data
        v2 = t2.data @ inter.wv2.data
        mu = v2.mean()
        var = ((v2 - mu) ** 2).mean()
        expected = (v2 - mu) / np.sqrt(var + inter.attn1.norm.eps) + q1

        s1 = inter.attn1(
            nm.matmul(t1, inter.wq1),
            nm.matmul(t2, inter.wk2),
            nm.matmul(t2, inter.wv2),
        )
        assert np.allclose(s1.data, expected, atol=1e-12)

    def test_token_count_mismatch(self):
        mod = make_module(4)
        with pytest.raises(DimensionError):
            mod.cross_domain_fuse(nm.tensor(np.zeros((4, 6))), nm.tensor(np.zeros((3, 6))))

    def test_grad_check_four_tokens(self):
        g = rng(5)
        mod = make_module(5)
        t1 = nm.tensor(g.standard_normal((4, 6)), requires_grad=True)
        t2d = g.standard_normal((4, 6))
        w = g.standard_normal((4, 6))

        def f(t):
            return nm.tsum(nm.mul(mod.cross_domain_fuse(t, nm.tensor(t2d)), nm.tensor(w)))

        assert nm.grad_check(f, t1).max_rel_err <= 1e-4


class TestComplementaryFuse:
    def test_zero_value_projection_reduces_to_constant_plus_zc(self):
        g = rng(6)
        mod = make_module(6)
        comp = mod.complementary
        comp.wv_0.data[:] = 0.0
        t1 = nm.tensor(g.standard_normal((4, 6)))
        t2 = nm.tensor(g.standard_normal((4, 6)))
        z_c = nm.tensor(g.standard_normal((4, 6)))
        out = comp(t1, t2, z_c)
        # attention over zero values is zero, LN maps it to beta (zeros here)
        assert np.allclose(out.data, z_c.data, atol=1e-12)

    def test_joint_permutation_equivariance(self):
        g = rng(7)
        mod = make_module(7)
        t1 = g.standard_normal((6, 6))
        t2 = g.standard_normal((6, 6))
        perm = g.permutation(6)

        mask_a = mod(nm.tensor(t1.reshape(2, 3, 6)), nm.tensor(t2.reshape(2, 3, 6)))
        z_f_a = mask_a.latent.data.reshape(6, 6)

        mask_b = mod(
            nm.tensor(t1[perm].reshape(2, 3, 6)), nm.tensor(t2[perm].reshape(2, 3, 6))
        )
        z_f_b = mask_b.latent.data.reshape(6, 6)
        assert np.allclose(z_f_b, z_f_a[perm], atol=1e-10)

    def test_z_c_permutation_equivariance(self):
        g = rng(8)
        mod = make_module(8)
        t1 = g.standard_normal((5, 6))
        t2 = g.standard_normal((5, 6))
        perm = g.permutation(5)
        z_a = mod.cross_domain_fuse(nm.tensor(t1), nm.tensor(t2)).data
        z_b = mod.cross_domain_fuse(nm.tensor(t1[perm]), nm.tensor(t2[perm])).data
        assert np.allclose(z_b, z_a[perm], atol=1e-10)

    def test_grad_check_four_tokens(self):
        g = rng(9)
        mod = make_module(9)
        t1 = nm.tensor(g.standard_normal((4, 6)), requires_grad=True)
        t2d = g.standard_normal((4, 6))
        w = g.standard_normal((4, 6))

        def f(t):
            z_c = mod.cross_domain_fuse(t, nm.tensor(t2d))
            z_f = mod.complementary_fuse(t, nm.tensor(t2d), z_c)
            return nm.tsum(nm.mul(z_f, nm.tensor(w)))

        assert nm.grad_check(f, t1).max_rel_err <= 1e-4

    def test_dk_must_equal_dc(self):
        with pytest.raises(ConfigError):
            fmp.FusionModule(rng(10), dc=6, d_k=4, mode="attention")


class TestFusionMaskHead:
    def test_upsamples_to_image_resolution(self):
        g = rng(11)
        mod = make_module(11, dc=5)
        z_f = nm.tensor(g.standard_normal((4, 4, 5)))
        mask = mod.fusion_mask(z_f)
        assert mask.map.shape == (16, 16, 3)
        assert mask.latent.shape == (4, 4, 5)

    def test_values_are_bounded(self):
        g = rng(12)
        mod = make_module(12, dc=5)
        mask = mod.fusion_mask(nm.tensor(g.standard_normal((2, 2, 5)) * 10))
        assert np.all(mask.map.data > 0.0) and np.all(mask.map.data < 1.0)

    def test_deterministic(self):
        g = rng(13)
        mod = make_module(13, dc=5)
        z = g.standard_normal((3, 3, 5))
        a = mod.fusion_mask(nm.tensor(z)).map.data
        b = mod.fusion_mask(nm.tensor(z.copy())).map.data
        assert np.array_equal(a, b)

    def test_full_module_grad_check(self):
        g = rng(14)
        mod = make_module(14, dc=4)
        t1 = nm.tensor(g.standard_normal((2, 2, 4)), requires_grad=True)
        t2d = g.standard_normal((2, 2, 4))
        w = g.standard_normal((8, 8, 3))

        def f(t):
            mask = mod(t, nm.tensor(t2d))
            return nm.tsum(nm.mul(mask.map, nm.tensor(w)))

        assert nm.grad_check(f, t1).max_rel_err <= 1e-4


class TestConcatVariant:
    def test_concat_mode_runs_without_attention(self):
        g = rng(15)
        mod = make_module(15, dc=4, mode="concat")
        mask = mod(nm.tensor(g.standard_normal((2, 2, 4))), nm.tensor(g.standard_normal((2, 2, 4))))
        assert mask.map.shape == (8, 8, 3)
        assert mod.attention_maps() == []

    def test_grid_shape_mismatch(self):
        mod = make_module(16, dc=4, mode="concat")
        with pytest.raises(DimensionError):
            mod(nm.tensor(np.zeros((2, 2, 4))), nm.tensor(np.zeros((2, 3, 4))))
