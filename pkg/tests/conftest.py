"""Shared fixtures.

Desk-scale trained models (keyframe coders at four lambdas, flow
pretraining, and five B-frame model arms for the ablation toggles) are
expensive to produce, so they are trained once and cached on disk under
tests/_cache; later runs load the checkpoints.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np
import pytest
import torch

torch.set_num_threads(max(1, os.cpu_count() or 1))

from hbvc import frames
from hbvc.models import (
    BFrameModel,
    ModelConfig,
    load_bframe_model,
    load_keyframe_coder,
    make_keyframe_coder,
)
from hbvc.training import (
    TrainConfig,
    pretrain_flow,
    pretrain_keyframe_coder,
    save_bframe_checkpoint,
    save_keyframe_checkpoint,
    train_bidirectional,
)

CACHE_DIR = os.path.join(os.path.dirname(__file__), "_cache", "v2")
N_LAMBDA = 4
KF_ITERS = 8000
B_ITERS = 5000
FLOW_ITERS = 3000

# Desk-scale lambda grids, calibrated so all four operating points sit on the
# sloped part of the achievable R-D curve for the synthetic ensemble (the
# published grids saturate at this model size). Index-matched pairing:
# keyframe coder i is used together with B-frame models trained at index i.
DESK_KEYFRAME_GRID = (0.0004, 0.0013, 0.004, 0.013)
DESK_BFRAME_GRID = (0.0004, 0.0013, 0.004, 0.013)

DESK_MODEL = ModelConfig(
    flow_levels=3, flow_channels=8, coder_filters=16, coder_latent=16,
    coder_hyper=8, mask_widths=(8, 16, 32), subsample_factor=4,
    temporal_prediction=True, context_model=False, mask_mode="learned",
)

# each ablation arm flips exactly one flag off the baseline
ARM_CONFIGS = {
    "baseline": DESK_MODEL,
    "no_subsample": replace(DESK_MODEL, subsample_factor=1),
    "no_prediction": replace(DESK_MODEL, temporal_prediction=False),
    "average_mask": replace(DESK_MODEL, mask_mode="average"),
    "context": replace(DESK_MODEL, context_model=True),
}


def _kf_path(i):
    return os.path.join(CACHE_DIR, f"keyframe_{i}.pt")


def _bm_path(arm, i):
    return os.path.join(CACHE_DIR, f"bframe_{arm}_{i}.pt")


def _flow_path():
    return os.path.join(CACHE_DIR, "flow_pretrained.pt")


def _train_cache():
    os.makedirs(CACHE_DIR, exist_ok=True)
    for i in range(N_LAMBDA):
        if not os.path.exists(_kf_path(i)):
            cfg = TrainConfig(lam=DESK_KEYFRAME_GRID[i], max_iters=KF_ITERS,
                              batch_size=2, crop=48, lr_init=1e-3,
                              plateau_patience=1500, seed=100)
            coder = make_keyframe_coder(16, 16, 8)
            pretrain_keyframe_coder(coder, cfg)
            save_keyframe_checkpoint(_kf_path(i), coder, cfg, i,
                                     lambda_grid=DESK_KEYFRAME_GRID)
    if not os.path.exists(_flow_path()):
        net = BFrameModel(DESK_MODEL).flow_net
        pretrain_flow(net, iters=FLOW_ITERS, seed=42, crop=48, batch=4, lr=1e-3)
        torch.save(net.state_dict(), _flow_path())
    flow_state = torch.load(_flow_path(), weights_only=True)
    for arm, mcfg in ARM_CONFIGS.items():
        for i in range(N_LAMBDA):
            if os.path.exists(_bm_path(arm, i)):
                continue
            cfg = TrainConfig(lam=DESK_BFRAME_GRID[i], max_iters=B_ITERS,
                              batch_size=2, crop=48, lr_init=1e-3,
                              plateau_patience=1200, seed=200)
            keyframe_coder, _ = load_keyframe_coder(_kf_path(i))
            model = BFrameModel(mcfg)
            model.flow_net.load_state_dict(flow_state)
            train_bidirectional(model, keyframe_coder, cfg)
            save_bframe_checkpoint(_bm_path(arm, i), model, cfg, i,
                                   lambda_grid=DESK_BFRAME_GRID)


class TrainedZoo:
    """Accessors over the cached desk-trained checkpoints."""

    n_lambda = N_LAMBDA
    arms = tuple(ARM_CONFIGS)

    def keyframe_coder(self, i):
        coder, extra = load_keyframe_coder(_kf_path(i))
        return coder

    def bframe_model(self, arm, i):
        model, extra = load_bframe_model(_bm_path(arm, i))
        return model

    def flow_net(self):
        net = BFrameModel(DESK_MODEL).flow_net
        net.load_state_dict(torch.load(_flow_path(), weights_only=True))
        net.eval()
        return net


@pytest.fixture(scope="session")
def zoo():
    _train_cache()
    return TrainedZoo()


# --------------------------------------------------------------------------
# untrained tiny models for structural tests


@pytest.fixture()
def tiny_model():
    torch.manual_seed(0)
    model = BFrameModel(DESK_MODEL)
    model.eval()
    return model


@pytest.fixture()
def tiny_keyframe_coder():
    torch.manual_seed(1)
    coder = make_keyframe_coder(16, 16, 8)
    coder.eval()
    return coder


# --------------------------------------------------------------------------
# held-out synthetic evaluation clips (seeds disjoint from training)


def _clip(kind, seed, **kw):
    spec = frames.SyntheticSpec(kind=kind, num_frames=9, height=64, width=64,
                                seed=seed, **kw)
    return frames.synth_sequence(spec)


@pytest.fixture(scope="session")
def motion_clips():
    return [
        _clip("constant_velocity", 9001, velocity=(1.4, -0.8)),
        _clip("constant_velocity", 9002, velocity=(-2.1, 0.6)),
        _clip("constant_velocity", 9003, velocity=(0.7, 1.9)),
    ]


@pytest.fixture(scope="session")
def occlusion_clips():
    return [
        _clip("occlusion", 9101, patch_velocity=(2.0, 0.5)),
        _clip("occlusion", 9102, patch_velocity=(-1.5, 1.0)),
    ]


@pytest.fixture(scope="session")
def static_clip():
    return _clip("static", 9201)


@pytest.fixture(scope="session")
def eval_clips(motion_clips, occlusion_clips, static_clip):
    return motion_clips + occlusion_clips + [static_clip]


def seeded_rng(seed=0):
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# acceptance criteria summary: one pass/fail line per criterion, printed
# after the test run

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
