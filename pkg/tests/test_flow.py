"""Backward warping and pyramid flow estimation."""

import numpy as np
import pytest
import torch

from hbvc.flow import PyramidFlowNet, backward_warp, estimate_flow, upscale_flow2x
from hbvc.training import grad_check


def _img(h=16, w=16, seed=0, ch=3):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, ch, h, w, generator=g)


class TestBackwardWarp:
    def test_zero_flow_is_identity(self):
        x = _img()
        out = backward_warp(x, torch.zeros(1, 2, 16, 16))
        assert torch.allclose(out, x, atol=1e-6)

    @pytest.mark.parametrize("dx,dy", [(1, 0), (0, 1), (3, -2), (-2, 2)])
    def test_integer_shift_recovers_interior(self, dx, dy):
        # warped(x) = reference(x + flow): constant flow (dx, dy) reads the
        # reference shifted by exactly that displacement
        ref = _img(24, 24, seed=2)
        flow = torch.zeros(1, 2, 24, 24)
        flow[:, 0] = dx
        flow[:, 1] = dy
        out = backward_warp(ref, flow)
        m = 4
        ys, xs = np.mgrid[m:24 - m, m:24 - m]
        expected = ref[0, :, ys + dy, xs + dx]
        assert torch.allclose(out[0, :, m:24 - m, m:24 - m], expected, atol=1e-6)

    def test_half_pixel_shift_is_two_tap_average(self):
        ref = _img(8, 8, seed=3)
        flow = torch.zeros(1, 2, 8, 8)
        flow[:, 0] = 0.5
        out = backward_warp(ref, flow)
        expected = 0.5 * (ref[:, :, :, 3] + ref[:, :, :, 4])
        assert torch.allclose(out[:, :, :, 3], expected, atol=1e-6)

    def test_out_of_bounds_samples_clamp_to_border(self):
        ref = _img(8, 8, seed=4)
        flow = torch.full((1, 2, 8, 8), 100.0)
        out = backward_warp(ref, flow)
        corner = ref[:, :, -1, -1]
        assert torch.allclose(out[:, :, 0, 0], corner, atol=1e-6)

    def test_differentiable_wrt_flow_and_image(self):
        res = grad_check("warp", seed=11)
        assert res["warp"] < 1e-3


class TestFlowUpscale:
    def test_doubles_size_and_magnitude(self):
        f = torch.randn(1, 2, 4, 4)
        up = upscale_flow2x(f, 8, 8)
        assert up.shape[-2:] == (8, 8)
        # constant flow: magnitudes double exactly
        c = torch.full((1, 2, 4, 4), 1.5)
        assert torch.allclose(upscale_flow2x(c, 8, 8), torch.full((1, 2, 8, 8), 3.0),
                              atol=1e-6)


class TestPyramidFlowNet:
    def test_output_shape(self):
        net = PyramidFlowNet(3, 8)
        out = net(_img(32, 32), _img(32, 32, seed=1))
        assert out.shape == (1, 2, 32, 32)

    def test_non_multiple_sizes_padded_internally(self):
        net = PyramidFlowNet(3, 8)
        out = net(_img(30, 27), _img(30, 27, seed=1))
        assert out.shape == (1, 2, 30, 27)

    def test_deterministic(self):
        torch.manual_seed(0)
        net = PyramidFlowNet(2, 4)
        a = net(_img(), _img(seed=1))
        b = net(_img(), _img(seed=1))
        assert torch.equal(a, b)

    def test_estimator_gradients_match_finite_differences(self):
        res = grad_check("flow", seed=5)
        assert res["flow"] < 1e-3

    def test_trained_net_recovers_constant_shift(self, zoo):
        # supervised pretraining on synthetic shifts: mean endpoint error
        # on a held-out shift should be below one pixel in the interior
        from hbvc.frames import SyntheticSpec, synth_sequence
        net = zoo.flow_net()
        seq = synth_sequence(SyntheticSpec(
            kind="constant_velocity", num_frames=2, height=48, width=48,
            seed=77777, velocity=(1.7, -1.1)))
        src = torch.from_numpy(seq.frames[1]).permute(2, 0, 1).unsqueeze(0)
        ref = torch.from_numpy(seq.frames[0]).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            est = estimate_flow(src, ref, net)
        gt = torch.tensor([-1.7, 1.1]).reshape(1, 2, 1, 1)
        epe = torch.norm(est[:, :, 8:-8, 8:-8] - gt, dim=1).mean()
        assert float(epe) < 1.0


class TestWarpFlowConsistency:
    def test_estimated_flow_reduces_warp_error(self, zoo):
        from hbvc.frames import SyntheticSpec, synth_sequence
        net = zoo.flow_net()
        seq = synth_sequence(SyntheticSpec(
            kind="constant_velocity", num_frames=2, height=48, width=48,
            seed=88888, velocity=(2.0, 0.5)))
        src = torch.from_numpy(seq.frames[1]).permute(2, 0, 1).unsqueeze(0)
        ref = torch.from_numpy(seq.frames[0]).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            flow = estimate_flow(src, ref, net)
            warped = backward_warp(ref, flow)
        before = float((src - ref).pow(2).mean())
        after = float((src - warped).pow(2).mean())
        assert after < before
