import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sted.geometry import (DisparityMap, align_events, backward_warp, pixel_shuffle,
                           pixel_unshuffle, shift_columns, upsample_disparity)

from oracles import central_diff_grad, index_shift, rel_err


def ramp(b=1, c=1, h=4, w=10):
    x = torch.arange(w, dtype=torch.float64)
    return x.expand(b, c, h, w).clone()


class TestBackwardWarp:
    def test_zero_disparity_identity(self):
        src = torch.randn(2, 3, 5, 7)
        out = backward_warp(src, torch.zeros(2, 1, 5, 7))
        assert torch.equal(out, src)

    def test_constant_image(self):
        src = torch.full((1, 2, 6, 12), 0.7, dtype=torch.float64)
        d = torch.rand(1, 1, 6, 12, dtype=torch.float64) * 8 - 4
        out = backward_warp(src, d)
        xs = torch.arange(12) - d
        inside = (xs >= 0) & (xs <= 11)
        np.testing.assert_allclose(out.expand_as(src)[inside.expand_as(src)], 0.7, atol=1e-12)

    @pytest.mark.parametrize("d", [3, -2, 0, 11, 15])
    def test_integer_shift_matches_oracle(self, d):
        src = ramp(h=3, w=12) + torch.randn(1, 1, 3, 12, dtype=torch.float64)
        out = backward_warp(src, torch.full((1, 1, 3, 12), float(d), dtype=torch.float64))
        np.testing.assert_allclose(out.numpy(), index_shift(src.numpy(), d), atol=1e-6, rtol=0)

    def test_half_pixel_interpolates(self):
        src = ramp(w=6)
        out = backward_warp(src, torch.full((1, 1, 4, 6), 0.5, dtype=torch.float64))
        # x - 0.5 between x-1 and x; first column has one out-of-range tap
        np.testing.assert_allclose(out[0, 0, 0].numpy(), [0.0, 0.5, 1.5, 2.5, 3.5, 4.5])

    def test_sign_convention(self):
        src = torch.zeros(1, 1, 1, 8)
        src[..., 2] = 1.0
        out = backward_warp(src, torch.full((1, 1, 8), 3.0))
        assert out[0, 0, 0].argmax().item() == 5

    def test_accepts_3d_disparity(self):
        src = torch.randn(2, 1, 3, 4)
        d = torch.rand(2, 3, 4)
        assert torch.equal(backward_warp(src, d), backward_warp(src, d[:, None]))

    def test_rejects_dim_mismatch(self):
        with pytest.raises(ValueError):
            backward_warp(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))

    def test_rejects_nonfinite(self):
        d = torch.zeros(1, 1, 2, 2)
        d[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            backward_warp(torch.zeros(1, 1, 2, 2), d)

    def test_gradients_match_finite_differences(self):
        g = torch.Generator().manual_seed(0)
        src = torch.randn(2, 2, 5, 9, dtype=torch.float64, generator=g, requires_grad=True)
        # fractional parts kept away from the integer kinks
        d_int = torch.randint(-3, 4, (2, 1, 5, 9), generator=g).double()
        d = (d_int + 0.1 + 0.8 * torch.rand(2, 1, 5, 9, dtype=torch.float64, generator=g)).requires_grad_()
        wts = torch.randn(2, 2, 5, 9, dtype=torch.float64, generator=g)

        def loss():
            return (backward_warp(src, d) * wts).sum()

        loss().backward()
        idx_src = torch.randperm(src.numel(), generator=g)[:100]
        idx_d = torch.randperm(d.numel(), generator=g)[:90]
        for i in idx_src.tolist():
            fd = central_diff_grad(loss, src.data, i)
            assert rel_err(src.grad.view(-1)[i].item(), fd) <= 1e-4
        for i in idx_d.tolist():
            fd = central_diff_grad(loss, d.data, i)
            assert rel_err(d.grad.view(-1)[i].item(), fd) <= 1e-4

    @settings(max_examples=30, deadline=None)
    @given(st.integers(-4, 4), st.floats(-3.0, 3.0), st.integers(0, 2 ** 31))
    def test_composition_of_constant_fields(self, d_int, d_frac, seed):
        # bilinear resampling composes exactly when one of the shifts is integral
        g = torch.Generator().manual_seed(seed)
        src = torch.randn(1, 1, 3, 24, dtype=torch.float64, generator=g)
        shape = (1, 1, 3, 24)

        def warp(x, d):
            return backward_warp(x, torch.full(shape, float(d), dtype=torch.float64))

        direct = warp(src, d_int + d_frac)
        for a in (warp(warp(src, d_int), d_frac), warp(warp(src, d_frac), d_int)):
            np.testing.assert_allclose(a[..., 8:-8].numpy(), direct[..., 8:-8].numpy(), atol=1e-5)

    def test_shift_columns_helper(self):
        src = torch.randn(1, 2, 3, 9)
        for d in (-10, -3, 0, 2, 9):
            np.testing.assert_array_equal(shift_columns(src, d).numpy(), index_shift(src.numpy(), d))


class TestPixelShuffle:
    def test_identity_factor(self):
        t = torch.randn(1, 3, 4, 6)
        assert torch.equal(pixel_unshuffle(t, 1), t)
        assert torch.equal(pixel_shuffle(t, 1), t)

    def test_definition_order(self):
        t = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])  # [[a, b], [c, d]]
        out = pixel_unshuffle(t, 2)
        assert out.shape == (1, 4, 1, 1)
        assert out.flatten().tolist() == [1.0, 2.0, 3.0, 4.0]

    @pytest.mark.parametrize("r", [1, 2, 4, 8])
    def test_round_trip_and_multiset(self, r):
        t = torch.randn(2, 3, 16, 24)
        u = pixel_unshuffle(t, r)
        assert u.shape == (2, 3 * r * r, 16 // r, 24 // r)
        assert torch.equal(pixel_shuffle(u, r), t)
        assert torch.equal(u.flatten().sort().values, t.flatten().sort().values)

    def test_rejects_indivisible(self):
        with pytest.raises(ValueError):
            pixel_unshuffle(torch.zeros(1, 1, 6, 6), 4)
        with pytest.raises(ValueError):
            pixel_shuffle(torch.zeros(1, 3, 2, 2), 2)


class TestAlignEvents:
    def test_zero_disparity(self):
        v = torch.randn(1, 5, 8, 8)
        assert torch.equal(align_events(v, torch.zeros(1, 1, 8, 8)), v)

    def test_integer_shift_per_bin(self):
        v = torch.randn(2, 4, 6, 10, dtype=torch.float64)
        out = align_events(v, torch.full((2, 1, 6, 10), 2.0, dtype=torch.float64))
        for k in range(4):
            np.testing.assert_allclose(out[:, k].numpy(), index_shift(v[:, k].numpy(), 2), atol=1e-6)

    def test_empty_grid(self):
        v = torch.zeros(1, 3, 8, 8)
        d = torch.rand(1, 1, 8, 8) * 5
        assert not align_events(v, d).any()


def test_upsample_disparity_scales_values():
    d = torch.full((1, 1, 4, 4), 1.5)
    up = upsample_disparity(d)
    assert up.shape == (1, 1, 8, 8)
    np.testing.assert_allclose(up.numpy(), 3.0)


def test_disparity_map_round_trip(tmp_path):
    data = np.random.default_rng(0).normal(size=(6, 10)).astype(np.float32)
    DisparityMap(data).save(tmp_path / "d.raw")
    back = DisparityMap.load(tmp_path / "d.raw")
    assert np.array_equal(back.data, data)
    assert (tmp_path / "d.json").read_text().count("x_minus_d") == 1


def test_disparity_map_rejects_nonfinite():
    with pytest.raises(ValueError):
        DisparityMap(np.array([[np.inf]]))
