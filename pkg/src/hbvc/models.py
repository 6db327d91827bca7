"""Model bundle and checkpoint container.

A checkpoint is a versioned file holding all subnetwork weights, the
configuration they were trained with, the lambda grids, and the feature
flags; flag mismatches at load time are hard errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .bitstream import MASK_AVERAGE, MASK_LEARNED
from .coder import CoderConfig, TransformCoder
from .compensation import MaskNet
from .flow import PyramidFlowNet

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Dimensions and feature flags of the B-frame compression model."""

    flow_levels: int = 4
    flow_channels: int = 16
    coder_filters: int = 128
    coder_latent: int = 128
    coder_hyper: int = 64
    mask_widths: tuple[int, int, int] = (16, 32, 64)
    subsample_factor: int = 4
    temporal_prediction: bool = True
    context_model: bool = False
    mask_mode: str = MASK_LEARNED

    def __post_init__(self):
        if self.subsample_factor not in (1, 2, 4):
            raise ValueError(f"subsample factor must be 1, 2 or 4, got {self.subsample_factor}")
        if self.mask_mode not in (MASK_LEARNED, MASK_AVERAGE):
            raise ValueError(f"unknown mask mode {self.mask_mode}")


class BFrameModel(nn.Module):
    """All trainable parts of bi-directional frame compression: flow
    estimator, motion delta coder, mask network, residual coder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.flow_net = PyramidFlowNet(cfg.flow_levels, cfg.flow_channels)
        self.motion_coder = TransformCoder(CoderConfig(
            in_channels=4, out_channels=4, filters=cfg.coder_filters,
            latent_channels=cfg.coder_latent, hyper_channels=cfg.coder_hyper,
            context_model=cfg.context_model,
        ))
        self.residual_coder = TransformCoder(CoderConfig(
            in_channels=3, out_channels=3, filters=cfg.coder_filters,
            latent_channels=cfg.coder_latent, hyper_channels=cfg.coder_hyper,
            context_model=cfg.context_model,
        ))
        self.mask_net = MaskNet(cfg.mask_widths)


def make_keyframe_coder(filters: int = 64, latent: int = 64, hyper: int = 32,
                        context_model: bool = False) -> TransformCoder:
    return TransformCoder(CoderConfig(
        in_channels=3, out_channels=3, filters=filters,
        latent_channels=latent, hyper_channels=hyper,
        context_model=context_model,
    ))


def save_checkpoint(path: str, module: nn.Module, config: dict,
                    extra: dict | None = None) -> None:
    torch.save({
        "checkpoint_version": CHECKPOINT_VERSION,
        "state_dict": module.state_dict(),
        "config": config,
        "extra": extra or {},
    }, path)


def load_checkpoint(path: str) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    return ckpt


def load_bframe_model(path: str) -> tuple[BFrameModel, dict]:
    ckpt = load_checkpoint(path)
    cfg_dict = dict(ckpt["config"])
    cfg_dict["mask_widths"] = tuple(cfg_dict.get("mask_widths", (16, 32, 64)))
    cfg = ModelConfig(**cfg_dict)
    model = BFrameModel(cfg)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt["extra"]


def load_keyframe_coder(path: str) -> tuple[TransformCoder, dict]:
    ckpt = load_checkpoint(path)
    coder = TransformCoder(CoderConfig(**ckpt["config"]))
    coder.load_state_dict(ckpt["state_dict"])
    coder.eval()
    return coder, ckpt["extra"]
