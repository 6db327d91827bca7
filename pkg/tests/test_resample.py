"""Flow-field subsampling and upsampling (separable cubic interpolation)."""

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hbvc.resample import resample2d, subsample_flow, upsample_flow


def _ramp(h, w, ax=1.0, ay=0.0, c=0.0):
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64),
                            torch.arange(w, dtype=torch.float64), indexing="ij")
    return (ax * xs + ay * ys + c).expand(1, 1, h, w).clone()


class TestConstants:
    @pytest.mark.parametrize("s", [2, 4])
    def test_subsample_preserves_constants(self, s):
        x = torch.full((1, 2, 16, 16), 3.25, dtype=torch.float64)
        out = subsample_flow(x, s)
        assert out.shape[-2:] == (16 // s, 16 // s)
        assert torch.allclose(out, torch.full_like(out, 3.25), atol=1e-6)

    @pytest.mark.parametrize("s", [2, 4])
    def test_round_trip_exact_on_constants(self, s):
        x = torch.full((1, 2, 16, 16), -1.5, dtype=torch.float64)
        back = upsample_flow(subsample_flow(x, s), s, 16, 16)
        assert torch.allclose(back, x, atol=1e-6)

    def test_s1_is_identity(self):
        x = torch.randn(1, 2, 8, 8, dtype=torch.float64)
        assert subsample_flow(x, 1) is x
        assert upsample_flow(x, 1, 8, 8) is x


class TestRamps:
    @pytest.mark.parametrize("s", [2, 4])
    def test_round_trip_interior_error_on_linear_ramp(self, s):
        x = _ramp(32, 32, ax=0.5, ay=-0.25, c=2.0)
        back = upsample_flow(subsample_flow(x, s), s, 32, 32)
        m = 3 * s  # boundary rows/cols use clamped taps
        err = (back - x)[:, :, m:-m, m:-m].abs().max()
        assert float(err) <= 1e-5

    @pytest.mark.parametrize("s", [2, 4])
    def test_subsample_reproduces_ramp_at_block_centers(self, s):
        ax, ay = 0.75, 0.3
        x = _ramp(32, 32, ax=ax, ay=ay)
        sub = subsample_flow(x, s)
        # block centers sit at (s-1)/2 + s*k in full-res coordinates
        ys = (s - 1) / 2 + s * torch.arange(32 // s, dtype=torch.float64)
        expected = ax * ys.reshape(1, -1) + ay * ys.reshape(-1, 1)
        interior = slice(2, -2)
        err = (sub[0, 0] - expected)[interior, interior].abs().max()
        assert float(err) <= 1e-5


class TestLinearityAndDeterminism:
    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=20, deadline=None)
    def test_linearity(self, seed):
        g = torch.Generator().manual_seed(seed)
        a = torch.randn(1, 2, 16, 16, generator=g, dtype=torch.float64)
        b = torch.randn(1, 2, 16, 16, generator=g, dtype=torch.float64)
        lhs = subsample_flow(2.0 * a - 3.0 * b, 4)
        rhs = 2.0 * subsample_flow(a, 4) - 3.0 * subsample_flow(b, 4)
        assert torch.allclose(lhs, rhs, atol=1e-10)

    def test_determinism(self):
        x = torch.randn(1, 2, 16, 16, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(3))
        assert torch.equal(subsample_flow(x, 2), subsample_flow(x, 2))
        lo = subsample_flow(x, 2)
        assert torch.equal(upsample_flow(lo, 2, 16, 16), upsample_flow(lo, 2, 16, 16))

    def test_gradients_flow_through(self):
        x = torch.randn(1, 2, 16, 16, dtype=torch.float64, requires_grad=True)
        out = upsample_flow(subsample_flow(x, 4), 4, 16, 16)
        out.sum().backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()


class TestResample2d:
    def test_identity_when_sizes_match(self):
        x = torch.randn(1, 2, 8, 8, dtype=torch.float64)
        out = resample2d(x, 8, 8)
        assert torch.allclose(out, x, atol=1e-9)

    def test_non_integer_ratio(self):
        x = _ramp(12, 12, ax=1.0)
        out = resample2d(x, 9, 9)
        assert out.shape[-2:] == (9, 9)
        assert torch.isfinite(out).all()
