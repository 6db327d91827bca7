"""Motion field compression: subsampling, temporal prediction and the
4-channel delta tensor handed to the motion transform coder.

Channel order of the delta tensor is fixed as
[bwd dx, bwd dy, fwd dx, fwd dy]; the backward flow points from the target
into the past reference, the forward flow into the future reference.
Prediction is applied in the subsampled domain: subsample -> subtract ->
code -> decode -> add -> upsample.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .resample import subsample_flow, upsample_flow


def pad_flow(flow: torch.Tensor, s: int) -> torch.Tensor:
    """Replicate-pad spatial dims to a multiple of s."""
    h, w = flow.shape[-2:]
    ph = (s - h % s) % s
    pw = (s - w % s) % s
    if ph or pw:
        flow = F.pad(flow, (0, pw, 0, ph), mode="replicate")
    return flow


def subsampled_size(n: int, s: int) -> int:
    return (n + s - 1) // s


def predict_flows(
    ref_flow_f2p: torch.Tensor | None,
    ref_flow_p2f: torch.Tensor | None,
    s: int,
    temporal_prediction: bool,
    height: int,
    width: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Subsampled-domain predictions for the target's two flows.

    pred_bwd = 0.5 * subsample(flow future_ref -> past_ref),
    pred_fwd = 0.5 * subsample(flow past_ref -> future_ref).
    With temporal prediction off both are zero fields.
    """
    lh, lw = subsampled_size(height, s) , subsampled_size(width, s)
    if not temporal_prediction:
        zero = torch.zeros(1, 2, lh, lw)
        return zero, zero.clone()
    if ref_flow_f2p is None or ref_flow_p2f is None:
        raise ValueError("temporal prediction requires both reference-to-reference flows")
    pred_bwd = 0.5 * subsample_flow(pad_flow(ref_flow_f2p, s), s)
    pred_fwd = 0.5 * subsample_flow(pad_flow(ref_flow_p2f, s), s)
    return pred_bwd, pred_fwd


def flows_to_delta(
    flow_bwd: torch.Tensor,
    flow_fwd: torch.Tensor,
    pred_bwd: torch.Tensor,
    pred_fwd: torch.Tensor,
    s: int,
) -> torch.Tensor:
    """Stack the subsampled prediction residuals into the 4-channel tensor."""
    sub_bwd = subsample_flow(pad_flow(flow_bwd, s), s)
    sub_fwd = subsample_flow(pad_flow(flow_fwd, s), s)
    return torch.cat([sub_bwd - pred_bwd, sub_fwd - pred_fwd], dim=1)


def delta_to_flows(
    delta_hat: torch.Tensor,
    pred_bwd: torch.Tensor,
    pred_fwd: torch.Tensor,
    s: int,
    height: int,
    width: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Reconstruct full-resolution flows: add predictions, upsample, crop."""
    low_bwd = delta_hat[:, 0:2] + pred_bwd
    low_fwd = delta_hat[:, 2:4] + pred_fwd
    ph = subsampled_size(height, s) * s
    pw = subsampled_size(width, s) * s
    flow_bwd = upsample_flow(low_bwd, s, ph, pw)[:, :, :height, :width]
    flow_fwd = upsample_flow(low_fwd, s, ph, pw)[:, :, :height, :width]
    return flow_bwd, flow_fwd
