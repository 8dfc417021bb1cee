import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from sted import metrics
from sted.losses import (DESK_PLAN, LossWeights, PerceptualExtractor, l_dblr, l_perc, l_tv,
                         total_loss)


def frames(seed, shape=(2, 3, 1, 16, 16), dtype=torch.float32):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


class TestDblr:
    def test_zero_on_identity(self):
        x = frames(0)
        assert l_dblr(x, x).item() == 0.0

    def test_constant_offset(self):
        x = frames(0, dtype=torch.float64)
        assert l_dblr(x + 0.25, x).item() == pytest.approx(0.25, abs=1e-12)

    def test_frames_weighted_equally(self):
        gt = torch.zeros(1, 4, 1, 4, 4)
        pred = gt.clone()
        pred[:, 1] = 1.0
        assert l_dblr(pred, gt).item() == pytest.approx(0.25)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l_dblr(torch.zeros(1, 3, 1, 4, 4), torch.zeros(1, 2, 1, 4, 4))


class TestPerceptual:
    def test_quadratic_under_linear_features(self):
        gt = frames(1, dtype=torch.float64)
        delta = frames(2, dtype=torch.float64) - 0.5
        a = l_perc(gt + delta, gt, lambda x: x)
        b = l_perc(gt + 2 * delta, gt, lambda x: x)
        assert b.item() == pytest.approx(4 * a.item(), rel=1e-12)

    def test_extractor_frozen_and_seeded(self):
        a, b = PerceptualExtractor(DESK_PLAN, seed=3), PerceptualExtractor(DESK_PLAN, seed=3)
        assert all(not p.requires_grad for p in a.parameters())
        x = torch.rand(1, 1, 16, 16)
        assert torch.equal(a(x), b(x))
        assert a(x).shape == (1, 32, 4, 4)
        a.train()
        assert not a.training

    def test_loads_state_dict(self, tmp_path):
        src = PerceptualExtractor(DESK_PLAN, seed=5)
        torch.save({f"features.{k}": v for k, v in src.features.state_dict().items()},
                   tmp_path / "w.pt")
        loaded = PerceptualExtractor(DESK_PLAN, weights=tmp_path / "w.pt")
        x = torch.rand(1, 3, 8, 8)
        assert torch.equal(src(x), loaded(x))

    def test_rejects_missing_weights(self, tmp_path):
        torch.save({"0.weight": torch.zeros(8, 3, 3, 3)}, tmp_path / "w.pt")
        with pytest.raises(ValueError):
            PerceptualExtractor(DESK_PLAN, weights=tmp_path / "w.pt")

    def test_zero_on_identity(self):
        x = frames(0)
        assert l_perc(x, x, PerceptualExtractor(DESK_PLAN)).item() == 0.0


class TestTV:
    def test_hand_computed(self):
        d = torch.tensor([[0.0, 1.0, 3.0], [2.0, 2.0, 2.0]], dtype=torch.float64)
        # |dx| mean: (1 + 2 + 0 + 0) / 4; |dy| mean: (2 + 1 + 1) / 3
        assert l_tv(d).item() == pytest.approx(0.75 + 4.0 / 3.0, abs=1e-12)

    def test_constant_field_zero(self):
        assert l_tv(torch.full((2, 1, 5, 7), 3.3)).item() == 0.0

    def test_single_pixel(self):
        assert l_tv(torch.ones(1, 1, 1, 1)).item() == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 100.0), st.integers(0, 2 ** 31))
    def test_absolutely_homogeneous(self, a, seed):
        d = torch.randn(1, 1, 6, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        assert l_tv(a * d).item() == pytest.approx(a * l_tv(d).item(), rel=1e-9, abs=1e-12)


class TestTotal:
    def test_breakdown_and_weighting(self):
        pred, gt = frames(0), frames(1)
        disp = torch.rand(2, 1, 16, 16)
        ext = PerceptualExtractor(DESK_PLAN)
        w = LossWeights(dblr=1.0, perc=0.5, tv=0.25)
        total, terms = total_loss(pred, gt, disp, w, ext)
        assert set(terms) == {"dblr", "perc", "tv"}
        expected = terms["dblr"] + 0.5 * terms["perc"] + 0.25 * terms["tv"]
        assert total.item() == pytest.approx(expected, rel=1e-6)

    def test_linear_in_weights(self):
        pred, gt = frames(0), frames(1)
        disp = torch.rand(2, 1, 16, 16)
        ext = PerceptualExtractor(DESK_PLAN)
        parts = [total_loss(pred, gt, disp, LossWeights(*w), ext)[0].item()
                 for w in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
        mixed = total_loss(pred, gt, disp, LossWeights(2.0, 3.0, 5.0), ext)[0].item()
        assert mixed == pytest.approx(2 * parts[0] + 3 * parts[1] + 5 * parts[2], rel=1e-5)

    def test_extra_disparities_add_tv(self):
        pred = gt = frames(0)
        d0, d1 = torch.rand(1, 1, 8, 8), torch.rand(1, 4, 8, 8)
        w = LossWeights(perc=0.0)
        _, t0 = total_loss(pred, gt, d0, w)
        _, t1 = total_loss(pred, gt, d0, w, extra_disparities=[d1])
        assert t1["tv"] == pytest.approx(t0["tv"] + l_tv(d1).item(), rel=1e-6)

    def test_no_disparity(self):
        _, terms = total_loss(frames(0), frames(1), None, LossWeights(perc=0.0))
        assert terms["tv"] == 0.0

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(tv=-1.0)


class TestPSNR:
    def test_uniform_offset(self):
        x = np.random.default_rng(0).uniform(0.2, 0.8, (3, 32, 32))
        assert metrics.psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-6)

    def test_identical_capped(self):
        x = np.ones((4, 4))
        assert metrics.psnr(x, x) == metrics.PSNR_CAP

    def test_translation_invariant(self):
        x = np.random.default_rng(1).uniform(size=(8, 8))
        y = np.random.default_rng(2).uniform(size=(8, 8))
        assert metrics.psnr(x + 0.3, y + 0.3) == pytest.approx(metrics.psnr(x, y), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.psnr(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSSIM:
    def test_identity(self):
        x = np.random.default_rng(0).uniform(size=(3, 32, 32))
        assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_reference_implementation(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(40, 48))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0)
        assert metrics.ssim(a, b) == pytest.approx(ref, abs=1e-6)

    def test_channel_average(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(2, 20, 20)), rng.uniform(size=(2, 20, 20))
        per = [metrics.ssim(a[c], b[c]) for c in range(2)]
        assert metrics.ssim(a, b) == pytest.approx(np.mean(per), abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        s = metrics.ssim(a, b)
        assert s == pytest.approx(metrics.ssim(b, a), abs=1e-12)
        assert -1.0 <= s <= 1.0

    def test_too_small(self):
        with pytest.raises(ValueError):
            metrics.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestDisparityMetrics:
    def test_constant_offset(self):
        gt = np.random.default_rng(0).uniform(0, 10, (16, 16))
        assert metrics.epe(gt + 2, gt) == pytest.approx(2.0, abs=1e-12)
        assert metrics.bad_pixel_ratio(gt + 2, gt, 1.0) == 100.0
        assert metrics.bad_pixel_ratio(gt + 2, gt, 3.0) == 0.0

    def test_mask(self):
        gt = np.zeros((2, 2))
        pred = np.array([[1.0, 5.0], [0.0, 0.0]])
        mask = np.array([[True, False], [True, False]])
        assert metrics.epe(pred, gt, mask) == pytest.approx(0.5)

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            metrics.epe(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 10.0), st.floats(0.0, 10.0))
    def test_bad_ratio_monotone(self, t1, t2):
        rng = np.random.default_rng(0)
        pred, gt = rng.uniform(0, 10, (8, 8)), rng.uniform(0, 10, (8, 8))
        lo, hi = sorted((t1, t2))
        assert metrics.bad_pixel_ratio(pred, gt, hi) <= metrics.bad_pixel_ratio(pred, gt, lo)


def test_psnr_mse_relation():
    x = np.zeros((10, 10))
    y = np.full((10, 10), 0.5)
    assert metrics.psnr(x, y) == pytest.approx(-10 * math.log10(0.25), abs=1e-12)
