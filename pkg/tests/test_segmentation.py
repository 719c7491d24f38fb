import numpy as np
import pytest

from fusionsam import numerics as nm, segmentation as seg
from fusionsam.errors import ContractError, DimensionError, NumericError


def rng(seed=0):
    return np.random.default_rng(seed)


class TestSamplePrompts:
    def test_tight_box_around_single_square(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[2:6, 3:7] = 1
        fusion = rng(1).uniform(0, 1, (8, 8, 3))
        prompts = seg.sample_prompts(fusion, labels, k=3)
        assert prompts.box == (2, 3, 5, 6)
        assert not prompts.fallback

    def test_round_robin_split_two_classes(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[:4] = 1
        labels[4:] = 2
        prompts = seg.sample_prompts(rng(2).uniform(0, 1, (8, 8, 3)), labels, k=10)
        per_class = {1: 0, 2: 0}
        for _, _, c in prompts.points:
            per_class[c] += 1
        assert per_class == {1: 5, 2: 5}

    def test_k1_matches_exhaustive_argmax_oracle(self):
        g = rng(3)
        labels = np.zeros((6, 6), dtype=np.int64)
        labels[1:5, 1:5] = 2
        fusion = g.uniform(0, 1, (6, 6, 3))
        prompts = seg.sample_prompts(fusion, labels, k=1)

        activation = fusion.mean(axis=2)
        best = None
        for r in range(6):
            for c in range(6):
                if labels[r, c] == 2:
                    if best is None or activation[r, c] > activation[best]:
                        best = (r, c)
        assert prompts.points[0] == (best[0], best[1], 2)

    def test_tie_break_row_major(self):
        labels = np.ones((3, 3), dtype=np.int64)
        fusion = np.full((3, 3, 1), 0.5)
        prompts = seg.sample_prompts(fusion, labels, k=2)
        assert prompts.points[0][:2] == (0, 0)
        assert prompts.points[1][:2] == (0, 1)

    def test_fallback_without_foreground(self):
        labels = np.zeros((8, 10), dtype=np.int64)
        prompts = seg.sample_prompts(np.zeros((8, 10, 3)), labels, k=5)
        assert prompts.fallback
        assert prompts.points == [(4, 5, 0)]
        assert prompts.box == (0, 0, 7, 9)

    def test_deterministic(self):
        g = rng(4)
        labels = (g.uniform(0, 1, (8, 8)) > 0.5).astype(np.int64)
        fusion = g.uniform(0, 1, (8, 8, 3))
        a = seg.sample_prompts(fusion, labels, k=6, seed=7)
        b = seg.sample_prompts(fusion.copy(), labels.copy(), k=6, seed=7)
        assert a == b


class TestPromptEncoder:
    def _encoder(self, seed=5):
        return seg.PromptEncoder(rng(seed), num_classes=4, d_tok=16)

    def _prompts(self):
        return seg.PromptSet(points=[(1, 2, 1), (5, 5, 2)], box=(0, 0, 7, 7))

    def test_token_count_is_k_plus_two(self):
        tokens = self._encoder()(self._prompts(), (8, 8))
        assert tokens.shape == (4, 16)

    def test_identical_prompts_identical_tokens(self):
        enc = self._encoder()
        a = enc(self._prompts(), (8, 8))
        b = enc(self._prompts(), (8, 8))
        assert np.array_equal(a.data, b.data)

    def test_shifting_one_point_changes_only_that_token(self):
        enc = self._encoder()
        base = enc(self._prompts(), (8, 8)).data
        moved = seg.PromptSet(points=[(1, 3, 1), (5, 5, 2)], box=(0, 0, 7, 7))
        shifted = enc(moved, (8, 8)).data
        assert not np.array_equal(base[0], shifted[0])
        assert np.array_equal(base[1:], shifted[1:])

    def test_out_of_bounds_rejected(self):
        enc = self._encoder()
        bad = seg.PromptSet(points=[(9, 1, 1)], box=(0, 0, 7, 7))
        with pytest.raises(ContractError):
            enc(bad, (8, 8))
        bad_box = seg.PromptSet(points=[(1, 1, 1)], box=(0, 0, 8, 7))
        with pytest.raises(ContractError):
            enc(bad_box, (8, 8))


class TestImageEncoder:
    def test_patch_arithmetic(self):
        enc = seg.ImageEncoder(rng(6), c_in=3, d_tok=16, patch=4)
        out = enc(nm.tensor(rng(7).uniform(0, 1, (16, 16, 3))))
        assert out.shape == (4, 4, 16)

    def test_non_divisible_resolution_rejected(self):
        enc = seg.ImageEncoder(rng(8), c_in=3, d_tok=16, patch=4)
        with pytest.raises(DimensionError):
            enc(nm.tensor(np.zeros((15, 16, 3))))

    def test_all_parameters_frozen(self):
        enc = seg.ImageEncoder(rng(9), c_in=3, d_tok=16)
        assert all(not p.requires_grad for p in enc.parameters())
        assert len(list(enc.parameters())) > 10

    def test_bitwise_deterministic(self):
        enc = seg.ImageEncoder(rng(10), c_in=3, d_tok=16)
        img = rng(11).uniform(0, 1, (16, 16, 3))
        a = enc(nm.tensor(img))
        b = enc(nm.tensor(img.copy()))
        assert np.array_equal(a.data, b.data)

    def test_gradient_flows_through_frozen_encoder(self):
        enc = seg.ImageEncoder(rng(12), c_in=3, d_tok=16)
        img = nm.tensor(rng(13).uniform(0, 1, (8, 8, 3)), requires_grad=True)
        nm.tsum(enc(img)).backward()
        assert img.grad is not None and np.any(img.grad != 0)
        assert all(p.grad is None for p in enc.parameters())


class TestMaskDecoder:
    def _head(self, seed=14, num_classes=3, d_tok=16):
        return seg.SegmentationHead(
            rng(seed), num_classes=num_classes, c_f=3, d_tok=d_tok, patch=4
        )

    def test_logits_shape_contract(self):
        head = self._head()
        fusion = nm.tensor(rng(15).uniform(0, 1, (16, 16, 3)))
        prompts = seg.PromptSet(points=[(2, 2, 1)], box=(0, 0, 15, 15))
        logits = head(fusion, prompts)
        assert logits.shape == (3, 16, 16)

    def test_prompt_free_pass(self):
        head = self._head(16)
        logits = head(nm.tensor(rng(17).uniform(0, 1, (16, 16, 3))), None)
        assert logits.shape == (3, 16, 16)

    def test_zero_head_gives_zero_logits_and_class_zero(self):
        head = self._head(18)
        head.decoder.head.fc2.w.data[:] = 0.0
        head.decoder.head.fc2.b.data[:] = 0.0
        fusion = nm.tensor(rng(19).uniform(0, 1, (16, 16, 3)))
        logits = head(fusion, None)
        assert np.all(logits.data == 0.0)
        assert np.all(seg.segment(logits).classes == 0)

    def test_width_mismatch_rejected(self):
        head = self._head(20)
        bad = nm.tensor(np.zeros((4, 4, 12)))
        with pytest.raises(DimensionError):
            head.mask_decode(bad, None)

    def test_grad_check_through_decoder(self):
        head = self._head(21, num_classes=2, d_tok=8)
        g = rng(22)
        emb = nm.tensor(g.standard_normal((2, 2, 8)), requires_grad=True)
        w = g.standard_normal((2, 8, 8))

        def f(t):
            return nm.tsum(nm.mul(head.mask_decode(t, None), nm.tensor(w)))

        assert nm.grad_check(f, emb).max_rel_err <= 1e-4

    def test_decoder_attention_rows_stochastic(self):
        head = self._head(23)
        fusion = nm.tensor(rng(24).uniform(0, 1, (16, 16, 3)))
        head(fusion, seg.PromptSet(points=[(1, 1, 1)], box=(0, 0, 15, 15)))
        maps = head.attention_maps()
        assert len(maps) == 6  # 2 layers x 3 attentions
        for m in maps:
            assert np.max(np.abs(m.sum(axis=1) - 1.0)) <= 1e-9


class TestSegment:
    def test_one_hot_logits(self):
        logits = np.zeros((3, 4, 4))
        logits[2] = 5.0
        assert np.all(seg.segment(nm.tensor(logits)).classes == 2)

    def test_all_equal_ties_to_class_zero(self):
        assert np.all(seg.segment(nm.tensor(np.ones((4, 5, 5)))).classes == 0)

    def test_matches_per_pixel_scan_oracle(self):
        g = rng(25)
        logits = g.standard_normal((5, 6, 7))
        got = seg.segment(nm.tensor(logits)).classes
        for i in range(6):
            for j in range(7):
                best, best_v = 0, logits[0, i, j]
                for c in range(1, 5):
                    if logits[c, i, j] > best_v:
                        best, best_v = c, logits[c, i, j]
                assert got[i, j] == best

    def test_argmax_invariances(self):
        g = rng(26)
        logits = g.standard_normal((4, 5, 5))
        base = seg.segment(nm.tensor(logits)).classes
        shifted = seg.segment(nm.tensor(logits + 3.7)).classes
        assert np.array_equal(base, shifted)
        monotone = seg.segment(nm.tensor(np.arctan(logits))).classes
        assert np.array_equal(base, monotone)

    def test_nan_rejected(self):
        bad = np.ones((2, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            seg.segment(nm.tensor(bad))
