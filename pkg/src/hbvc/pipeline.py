"""GOP encoding and decoding per the coding plan.

The encoder embeds the decoder: every reference it uses is a decoded frame,
and all decoder-side computations (reference-to-reference flow estimation,
entropy parameters) run through the same functions on both sides, so
encoder-side and standalone reconstructions are bit-identical on one
machine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import metrics
from .bitstream import (
    MASK_AVERAGE,
    StreamHeader,
    read_bitstream,
    write_bitstream,
)
from .coder import TransformCoder
from .compensation import average_mask, fuse
from .flow import backward_warp, estimate_flow
from .frames import VideoSequence
from .gop import FUTURE_TO_PAST, CodingStep, plan_sequence
from .models import BFrameModel
from .motion import delta_to_flows, flows_to_delta, predict_flows
from .rangecoder import StreamCorruptError, read_uvarint, write_uvarint


class PipelineError(Exception):
    pass


@dataclass
class DecodedStore:
    """Decoded frames and flows available to later coding steps.

    Flow keys are (source_grid, points_to) frame indices; provenance is
    "decoded" for transmitted flows and "estimated" for decoder-side
    re-estimated reference-to-reference flows.
    """

    frames: dict[int, torch.Tensor] = field(default_factory=dict)
    flows: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)
    flow_provenance: dict[tuple[int, int], str] = field(default_factory=dict)

    def put_flow(self, src: int, dst: int, flow: torch.Tensor, provenance: str):
        self.flows[(src, dst)] = flow
        self.flow_provenance[(src, dst)] = provenance


def to_tensor(frame: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frame)).permute(2, 0, 1).unsqueeze(0).float()


def to_frame(t: torch.Tensor) -> np.ndarray:
    return t.squeeze(0).permute(1, 2, 0).numpy()


def reference_flows(step: CodingStep, store: DecodedStore, model: BFrameModel):
    """Reference-to-reference flows for temporal prediction, identical at
    encoder and decoder.

    Level 1 estimates both directions between the decoded references; at
    deeper levels one direction is the inherited decoded flow and the
    other is estimated.
    """
    p, f = step.past_ref, step.future_ref
    ref_p = store.frames[p]
    ref_f = store.frames[f]
    if step.inherited_flow is None:
        f2p = _estimated_flow(store, f, p, ref_f, ref_p, model)
        p2f = _estimated_flow(store, p, f, ref_p, ref_f, model)
        return f2p, p2f
    inh = step.inherited_flow
    if inh.direction == FUTURE_TO_PAST:
        key = (f, p)
        if key not in store.flows:
            raise PipelineError(f"missing inherited flow {key}")
        f2p = store.flows[key]
        p2f = _estimated_flow(store, p, f, ref_p, ref_f, model)
    else:
        key = (p, f)
        if key not in store.flows:
            raise PipelineError(f"missing inherited flow {key}")
        p2f = store.flows[key]
        f2p = _estimated_flow(store, f, p, ref_f, ref_p, model)
    return f2p, p2f


def _estimated_flow(store, src, dst, src_frame, dst_frame, model):
    key = (src, dst)
    if key not in store.flows:
        flow = estimate_flow(src_frame, dst_frame, model.flow_net)
        store.put_flow(src, dst, flow, "estimated")
    return store.flows[key]


@torch.no_grad()
def encode_keyframe(frame: torch.Tensor, coder: TransformCoder):
    """Intra-code a frame; returns ([z chunk, y chunk], decoded frame)."""
    chunk_z, chunk_y, x_hat = coder.compress(frame)
    return [chunk_z, chunk_y], torch.clamp(x_hat, 0.0, 1.0)


@torch.no_grad()
def decode_keyframe(chunks: list[bytes], coder: TransformCoder, h: int, w: int):
    x_hat = coder.decompress(chunks[0], chunks[1], h, w)
    return torch.clamp(x_hat, 0.0, 1.0)


def _fusion(warped_p, warped_f, model: BFrameModel):
    if model.cfg.mask_mode == MASK_AVERAGE:
        mask = average_mask(warped_p)
    else:
        mask = model.mask_net(warped_p, warped_f)
    return fuse(warped_p, warped_f, mask)


@torch.no_grad()
def encode_bstep(step: CodingStep, target: torch.Tensor, store: DecodedStore,
                 model: BFrameModel, skip_residual: bool = False):
    """Code one B frame; returns (4 chunks, decoded frame, bit counts)."""
    for ref in (step.past_ref, step.future_ref):
        if ref not in store.frames:
            raise PipelineError(f"reference {ref} not decoded before step {step.target}")
    cfg = model.cfg
    s = cfg.subsample_factor
    h, w = target.shape[-2:]
    ref_p = store.frames[step.past_ref]
    ref_f = store.frames[step.future_ref]

    flow_bwd = estimate_flow(target, ref_p, model.flow_net)
    flow_fwd = estimate_flow(target, ref_f, model.flow_net)

    if cfg.temporal_prediction:
        f2p, p2f = reference_flows(step, store, model)
    else:
        f2p = p2f = None
    pred_bwd, pred_fwd = predict_flows(f2p, p2f, s, cfg.temporal_prediction, h, w)

    delta = flows_to_delta(flow_bwd, flow_fwd, pred_bwd, pred_fwd, s)
    chunk_mz, chunk_my, delta_hat = model.motion_coder.compress(delta)
    dec_bwd, dec_fwd = delta_to_flows(delta_hat, pred_bwd, pred_fwd, s, h, w)

    warped_p = backward_warp(ref_p, dec_bwd)
    warped_f = backward_warp(ref_f, dec_fwd)
    fused = _fusion(warped_p, warped_f, model)

    if skip_residual:
        decoded = fused
        chunks = [chunk_mz, chunk_my]
    else:
        residual = target - fused
        chunk_rz, chunk_ry, r_hat = model.residual_coder.compress(residual)
        decoded = torch.clamp(fused + r_hat, 0.0, 1.0)
        chunks = [chunk_mz, chunk_my, chunk_rz, chunk_ry]

    store.frames[step.target] = decoded
    store.put_flow(step.target, step.past_ref, dec_bwd, "decoded")
    store.put_flow(step.target, step.future_ref, dec_fwd, "decoded")
    return chunks, decoded


@torch.no_grad()
def decode_bstep(step: CodingStep, chunks: list[bytes], store: DecodedStore,
                 model: BFrameModel, h: int, w: int):
    for ref in (step.past_ref, step.future_ref):
        if ref not in store.frames:
            raise PipelineError(f"reference {ref} not decoded before step {step.target}")
    cfg = model.cfg
    s = cfg.subsample_factor
    ref_p = store.frames[step.past_ref]
    ref_f = store.frames[step.future_ref]

    if cfg.temporal_prediction:
        f2p, p2f = reference_flows(step, store, model)
    else:
        f2p = p2f = None
    pred_bwd, pred_fwd = predict_flows(f2p, p2f, s, cfg.temporal_prediction, h, w)

    lh, lw = pred_bwd.shape[-2:]
    delta_hat = model.motion_coder.decompress(chunks[0], chunks[1], lh, lw)
    dec_bwd, dec_fwd = delta_to_flows(delta_hat, pred_bwd, pred_fwd, s, h, w)

    warped_p = backward_warp(ref_p, dec_bwd)
    warped_f = backward_warp(ref_f, dec_fwd)
    fused = _fusion(warped_p, warped_f, model)

    r_hat = model.residual_coder.decompress(chunks[2], chunks[3], h, w)
    decoded = torch.clamp(fused + r_hat, 0.0, 1.0)

    store.frames[step.target] = decoded
    store.put_flow(step.target, step.past_ref, dec_bwd, "decoded")
    store.put_flow(step.target, step.future_ref, dec_fwd, "decoded")
    return decoded


def pack_frame_blocks(blocks: list[bytes]) -> bytes:
    """Join one frame's coder payloads into a single container chunk: each
    block but the last is preceded by a varint length."""
    out = bytearray()
    for b in blocks[:-1]:
        out += write_uvarint(len(b))
        out += b
    out += blocks[-1]
    return bytes(out)


def split_frame_blocks(chunk: bytes, n: int) -> list[bytes]:
    """Inverse of pack_frame_blocks for a frame with n coder payloads."""
    blocks = []
    off = 0
    for _ in range(n - 1):
        ln, off = read_uvarint(chunk, off)
        if off + ln > len(chunk):
            raise StreamCorruptError("truncated frame chunk")
        blocks.append(chunk[off:off + ln])
        off += ln
    blocks.append(chunk[off:])
    return blocks


def _coding_order(num_frames: int, gop_size: int):
    """Yield ("key", frame) and ("b", global_step) events in coding order."""
    events = []
    for start, plan in plan_sequence(num_frames, gop_size):
        if plan is None:
            events.append(("key", start, None))
            continue
        if start == 0:
            events.append(("key", 0, None))
        events.append(("key", start + plan.gop_size, None))
        for step in plan.steps:
            gstep = CodingStep(
                start + step.target, start + step.past_ref,
                start + step.future_ref, step.level,
                step.inherited_flow if step.inherited_flow is None else
                type(step.inherited_flow)(
                    step.inherited_flow.direction,
                    start + step.inherited_flow.source_target,
                ),
            )
            events.append(("b", None, gstep))
    return events


@torch.no_grad()
def encode_video(seq: VideoSequence, keyframe_coder: TransformCoder,
                 model: BFrameModel, lambda_id: int = 0,
                 gop_size: int = 8) -> tuple[bytes, list[dict]]:
    """Encode a sequence; returns (bitstream bytes, per-frame stats in
    coding order)."""
    cfg = model.cfg
    header = StreamHeader(
        width=seq.width, height=seq.height, gop_size=gop_size,
        lambda_id=lambda_id, frame_count=len(seq),
        subsample_factor=cfg.subsample_factor,
        temporal_prediction=cfg.temporal_prediction,
        context_model=cfg.context_model, mask_mode=cfg.mask_mode,
    )
    store = DecodedStore()
    all_chunks: list[bytes] = []
    stats = []
    pixels = seq.width * seq.height
    for kind, frame_idx, step in _coding_order(len(seq), gop_size):
        if kind == "key":
            if frame_idx in store.frames:
                continue
            original = to_tensor(seq.frames[frame_idx])
            chunks, decoded = encode_keyframe(original, keyframe_coder)
            store.frames[frame_idx] = decoded
            stats.append(_frame_stats(frame_idx, 0, 0, _bits(chunks), original, decoded, pixels))
        else:
            original = to_tensor(seq.frames[step.target])
            chunks, decoded = encode_bstep(step, original, store, model)
            stats.append(_frame_stats(
                step.target, step.level, _bits(chunks[:2]), _bits(chunks[2:]),
                original, decoded, pixels,
            ))
        all_chunks.append(pack_frame_blocks(chunks))
    return write_bitstream(header, all_chunks), stats


def _bits(chunks: list[bytes]) -> int:
    return sum(8 * len(c) for c in chunks)


def _frame_stats(frame, level, motion_bits, residual_bits, original, decoded, pixels):
    return {
        "frame": int(frame),
        "level": int(level),
        "bpp_motion": motion_bits / pixels,
        "bpp_residual": residual_bits / pixels,
        "psnr": metrics.psnr(to_frame(original), to_frame(decoded)),
        "msssim": metrics.ms_ssim(to_frame(original), to_frame(decoded))[0],
    }


@torch.no_grad()
def decode_video(data: bytes, keyframe_coder: TransformCoder,
                 model: BFrameModel) -> VideoSequence:
    """Decode a bitstream back to frames in display order."""
    header, chunks = read_bitstream(data)
    cfg = model.cfg
    mismatches = []
    if header.subsample_factor != cfg.subsample_factor:
        mismatches.append("subsample_factor")
    if header.temporal_prediction != cfg.temporal_prediction:
        mismatches.append("temporal_prediction")
    if header.context_model != cfg.context_model:
        mismatches.append("context_model")
    if header.mask_mode != cfg.mask_mode:
        mismatches.append("mask_mode")
    if mismatches:
        raise StreamCorruptError(
            "stream flags do not match the loaded model: " + ", ".join(mismatches)
        )
    store = DecodedStore()
    h, w = header.height, header.width
    pos = 0
    for kind, frame_idx, step in _coding_order(header.frame_count, header.gop_size):
        if kind == "key":
            if frame_idx in store.frames:
                continue
            blocks = split_frame_blocks(chunks[pos], 2)
            store.frames[frame_idx] = decode_keyframe(blocks, keyframe_coder, h, w)
            pos += 1
        else:
            blocks = split_frame_blocks(chunks[pos], 4)
            decode_bstep(step, blocks, store, model, h, w)
            pos += 1
    if pos != len(chunks):
        raise StreamCorruptError("chunk count does not match the coding plan")
    frames = [to_frame(store.frames[i].clamp(0, 1)) for i in range(header.frame_count)]
    return VideoSequence(frames)
