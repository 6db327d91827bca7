"""Mask-based fusion of the two warped reference frames."""

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hbvc.compensation import MaskNet, average_mask, estimate_mask, fuse, oracle_mask
from hbvc.training import grad_check


def _t(shape, seed=0, scale=1.0, offset=0.0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g) * scale + offset


class TestFuse:
    def test_mask_one_selects_past(self):
        wp, wf = _t((1, 3, 8, 8), 1), _t((1, 3, 8, 8), 2)
        out = fuse(wp, wf, torch.ones(1, 1, 8, 8))
        assert torch.equal(out, wp)

    def test_mask_zero_selects_future(self):
        wp, wf = _t((1, 3, 8, 8), 1), _t((1, 3, 8, 8), 2)
        out = fuse(wp, wf, torch.zeros(1, 1, 8, 8))
        assert torch.equal(out, wf)

    def test_mask_half_is_arithmetic_mean(self):
        wp, wf = _t((1, 3, 8, 8), 1), _t((1, 3, 8, 8), 2)
        out = fuse(wp, wf, average_mask(wp))
        assert torch.allclose(out, 0.5 * (wp + wf), atol=1e-7)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30, deadline=None)
    def test_convexity_output_within_input_envelope(self, seed):
        g = torch.Generator().manual_seed(seed)
        wp = torch.rand(1, 3, 6, 6, generator=g)
        wf = torch.rand(1, 3, 6, 6, generator=g)
        mask = torch.rand(1, 1, 6, 6, generator=g)
        out = fuse(wp, wf, mask)
        lo = torch.minimum(wp, wf)
        hi = torch.maximum(wp, wf)
        assert bool((out >= lo - 1e-6).all()) and bool((out <= hi + 1e-6).all())

    def test_out_of_range_mask_rejected(self):
        wp, wf = _t((1, 3, 4, 4), 1), _t((1, 3, 4, 4), 2)
        with pytest.raises(ValueError):
            fuse(wp, wf, torch.full((1, 1, 4, 4), 1.5))

    def test_multichannel_mask_rejected(self):
        wp, wf = _t((1, 3, 4, 4), 1), _t((1, 3, 4, 4), 2)
        with pytest.raises(ValueError):
            fuse(wp, wf, torch.full((1, 3, 4, 4), 0.5))


class TestMaskNet:
    def test_output_single_channel_in_unit_interval(self):
        net = MaskNet((4, 8, 8))
        with torch.no_grad():
            m = net(_t((1, 3, 16, 16), 1), _t((1, 3, 16, 16), 2))
        assert m.shape == (1, 1, 16, 16)
        assert float(m.min()) >= 0.0 and float(m.max()) <= 1.0

    def test_non_multiple_of_four_sizes(self):
        net = MaskNet((4, 8, 8))
        m = net(_t((1, 3, 15, 13), 1), _t((1, 3, 15, 13), 2))
        assert m.shape == (1, 1, 15, 13)

    def test_estimate_mask_wraps_net(self):
        torch.manual_seed(0)
        net = MaskNet((4, 8, 8))
        wp, wf = _t((1, 3, 8, 8), 1), _t((1, 3, 8, 8), 2)
        assert torch.equal(estimate_mask(wp, wf, net), net(wp, wf))

    def test_gradients_match_finite_differences(self):
        res = grad_check("mask", seed=2)
        assert res["mask"] < 1e-3


class TestOracleMask:
    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40, deadline=None)
    def test_oracle_never_worse_than_average_or_single_direction(self, seed):
        g = torch.Generator().manual_seed(seed)
        wp = torch.rand(1, 3, 8, 8, generator=g)
        wf = torch.rand(1, 3, 8, 8, generator=g)
        gt = torch.rand(1, 3, 8, 8, generator=g)
        fo = fuse(wp, wf, oracle_mask(wp, wf, gt))
        err_o = float((fo - gt).pow(2).mean())
        for mask in (average_mask(wp), torch.ones(1, 1, 8, 8), torch.zeros(1, 1, 8, 8)):
            err = float((fuse(wp, wf, mask) - gt).pow(2).mean())
            assert err_o <= err + 1e-9

    def test_identical_inputs_give_half(self):
        wp = _t((1, 3, 4, 4), 1)
        gt = _t((1, 3, 4, 4), 2)
        m = oracle_mask(wp, wp.clone(), gt)
        assert torch.allclose(m, torch.full_like(m, 0.5))

    def test_perfect_side_gets_full_weight(self):
        gt = _t((1, 3, 4, 4), 3)
        wf = gt + 0.05
        m = oracle_mask(gt.clone(), wf, gt)
        assert torch.allclose(m, torch.ones_like(m))
