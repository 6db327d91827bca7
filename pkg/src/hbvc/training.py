"""Joint rate-distortion training of the B-frame model, keyframe coder
pretraining, pyramid flow pretraining and gradient verification.

One model is trained per lambda; the keyframe coder is trained first and
frozen during B-frame training. Training minimizes the triplet loss
lambda * distortion + R_flow + R_residual (bits per pixel); the keyframe
rate term enters only in evaluation accounting. Distortion is MSE scaled
by distortion_scale (default 255^2, so the lambda grids operate in 8-bit
units) or 1 - MS-SSIM.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import frames
from .coder import TransformCoder
from .compensation import average_mask, fuse
from .flow import backward_warp, estimate_flow
from .metrics import ms_ssim_torch
from .models import BFrameModel, save_checkpoint
from .motion import delta_to_flows, flows_to_delta, predict_flows
from .bitstream import MASK_AVERAGE

KEYFRAME_LAMBDA_GRID = (0.0130, 0.0250, 0.0483, 0.0932, 0.1800)
BFRAME_LAMBDA_GRID = (0.0035, 0.0067, 0.0130, 0.0250, 0.0483)


class TrainingDiverged(Exception):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.0130
    distortion: str = "mse"  # mse | one_minus_msssim
    distortion_scale: float = 255.0 ** 2
    batch_size: int = 4
    crop: int = 64
    lr_init: float = 1e-4
    plateau_patience: int = 25_000
    lr_decay_factor: float = 2.0
    max_iters: int = 50_000
    seed: int = 0
    endpoint_mode: str = "decoded"  # decoded | pristine

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.distortion not in ("mse", "one_minus_msssim"):
            raise ValueError(f"unknown distortion {self.distortion}")
        if self.endpoint_mode not in ("decoded", "pristine"):
            raise ValueError(f"unknown endpoint mode {self.endpoint_mode}")


# ---------------------------------------------------------------------------
# synthetic training data


def sample_triplet(seed: int, index: int, crop: int) -> frames.TripletSample:
    """Deterministic triplet for (seed, index): a synthetic 7-frame
    sequence, cropped, one of its nine level-emulating triplets."""
    rng = np.random.default_rng((seed, index))
    kind_draw = rng.random()
    size = crop + 8
    if kind_draw < 0.65:
        v = rng.uniform(-2.5, 2.5, size=2)
        spec = frames.SyntheticSpec(
            kind="constant_velocity", num_frames=7, height=size, width=size,
            seed=int(rng.integers(1 << 31)), velocity=(float(v[0]), float(v[1])),
        )
    elif kind_draw < 0.9:
        pv = rng.uniform(-2.0, 2.0, size=2)
        spec = frames.SyntheticSpec(
            kind="occlusion", num_frames=7, height=size, width=size,
            seed=int(rng.integers(1 << 31)),
            patch_velocity=(float(pv[0]), float(pv[1])),
            patch_size=max(8, size // 4),
        )
    else:
        spec = frames.SyntheticSpec(
            kind="static", num_frames=7, height=size, width=size,
            seed=int(rng.integers(1 << 31)),
        )
    seq = frames.synth_sequence(spec)
    cropped = frames.random_crop(seq.frames, crop, int(rng.integers(1 << 31)))
    triplets = frames.make_triplets(frames.VideoSequence(cropped))
    return triplets[int(rng.integers(len(triplets)))]


def triplet_batch(seed: int, iteration: int, batch: int, crop: int):
    samples = [sample_triplet(seed, iteration * batch + b, crop) for b in range(batch)]
    stack = lambda key: torch.stack([
        torch.from_numpy(getattr(s, key)).permute(2, 0, 1) for s in samples
    ]).float()
    return stack("past"), stack("middle"), stack("future")


def image_batch(seed: int, iteration: int, batch: int, crop: int) -> torch.Tensor:
    _, middle, _ = triplet_batch(seed, iteration, batch, crop)
    return middle


# ---------------------------------------------------------------------------
# loss


def distortion_term(recon: torch.Tensor, target: torch.Tensor, cfg: TrainConfig):
    if cfg.distortion == "mse":
        return (recon - target).pow(2).mean()
    score, _ = ms_ssim_torch(recon, target)
    return 1.0 - score


@dataclass
class LossBreakdown:
    loss: float
    distortion: float
    rate_flow: float
    rate_residual: float


def bstep_rd_forward(model: BFrameModel, past: torch.Tensor, middle: torch.Tensor,
                     future: torch.Tensor, mode: str = "train") -> dict:
    """Differentiable bi-directional coding of the middle frame.

    Both reference-to-reference flows are estimated fresh (as at hierarchy
    level 1); returns reconstruction and rate terms in bits/pixel.
    """
    cfg = model.cfg
    s = cfg.subsample_factor
    h, w = middle.shape[-2:]
    pixels = middle.shape[0] * h * w

    flow_bwd = estimate_flow(middle, past, model.flow_net)
    flow_fwd = estimate_flow(middle, future, model.flow_net)
    if cfg.temporal_prediction:
        f2p = estimate_flow(future, past, model.flow_net)
        p2f = estimate_flow(past, future, model.flow_net)
    else:
        f2p = p2f = None
    pred_bwd, pred_fwd = predict_flows(f2p, p2f, s, cfg.temporal_prediction, h, w)

    delta = flows_to_delta(flow_bwd, flow_fwd, pred_bwd, pred_fwd, s)
    mout = model.motion_coder(delta, mode=mode)
    dec_bwd, dec_fwd = delta_to_flows(mout["x_hat"], pred_bwd, pred_fwd, s, h, w)

    warped_p = backward_warp(past, dec_bwd)
    warped_f = backward_warp(future, dec_fwd)
    if cfg.mask_mode == MASK_AVERAGE:
        mask = average_mask(warped_p)
    else:
        mask = model.mask_net(warped_p, warped_f)
    fused = fuse(warped_p, warped_f, mask)

    rout = model.residual_coder(middle - fused, mode=mode)
    recon = fused + rout["x_hat"]
    return {
        "recon": recon,
        "fused": fused,
        "rate_flow": (mout["bits_y"] + mout["bits_z"]) / pixels,
        "rate_residual": (rout["bits_y"] + rout["bits_z"]) / pixels,
    }


# ---------------------------------------------------------------------------
# training loops


def _f(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _log_line(log_file, record: dict):
    if log_file is not None:
        log_file.write(json.dumps(record) + "\n")


def pretrain_flow(flow_net, iters: int = 2000, seed: int = 0, lr: float = 1e-3,
                  crop: int = 48, batch: int = 4, max_shift: float = 3.0,
                  log_file=None) -> None:
    """Supervised pretraining on synthetic constant shifts with known flow."""
    torch.manual_seed(seed)
    opt = torch.optim.Adam(flow_net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for it in range(iters):
        srcs, refs, gts = [], [], []
        for _ in range(batch):
            v = rng.uniform(-max_shift, max_shift, size=2)
            spec = frames.SyntheticSpec(
                kind="constant_velocity", num_frames=2, height=crop, width=crop,
                seed=int(rng.integers(1 << 31)), velocity=(float(v[0]), float(v[1])),
            )
            seq = frames.synth_sequence(spec)
            # src = frame 1, ref = frame 0: flow(src->ref) = -v
            srcs.append(torch.from_numpy(seq.frames[1]).permute(2, 0, 1))
            refs.append(torch.from_numpy(seq.frames[0]).permute(2, 0, 1))
            gts.append(torch.tensor([-v[0], -v[1]], dtype=torch.float32))
        src = torch.stack(srcs).float()
        ref = torch.stack(refs).float()
        gt = torch.stack(gts).reshape(batch, 2, 1, 1).expand(batch, 2, crop, crop)
        est = flow_net(src, ref)
        m = 4  # ignore borders where edge clamping breaks the shift model
        epe = torch.norm((est - gt)[:, :, m:-m, m:-m], dim=1).mean()
        if not torch.isfinite(epe):
            raise TrainingDiverged(f"flow pretrain diverged at iteration {it}")
        opt.zero_grad()
        epe.backward()
        opt.step()
        _log_line(log_file, {"iter": it, "epe": _f(epe)})


def pretrain_keyframe_coder(coder: TransformCoder, cfg: TrainConfig,
                            log_file=None) -> None:
    """Rate-distortion pretraining of the intra coder on synthetic crops."""
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(coder.parameters(), lr=cfg.lr_init)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=1.0 / cfg.lr_decay_factor, patience=cfg.plateau_patience)
    coder.train()
    for it in range(cfg.max_iters):
        x = image_batch(cfg.seed, it, cfg.batch_size, cfg.crop)
        out = coder(x, mode="train")
        d = distortion_term(out["x_hat"], x, cfg)
        rate = (out["bits_y"] + out["bits_z"]) / x[:, 0].numel()
        loss = cfg.lam * cfg.distortion_scale * d + rate
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"keyframe pretraining diverged at iteration {it}: "
                f"D={float(d)} R={float(rate)}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step(float(loss.detach()))
        _log_line(log_file, {
            "iter": it, "L": _f(loss), "D": _f(d), "R": _f(rate),
            "lr": opt.param_groups[0]["lr"],
        })
    coder.eval()


def train_bidirectional(model: BFrameModel, keyframe_coder: TransformCoder,
                        cfg: TrainConfig, log_file=None) -> None:
    """Joint R-D training of flow, motion coder, mask and residual coder.

    The keyframe coder stays frozen; with endpoint_mode "decoded" the
    triplet endpoints are passed through it (inference quantization,
    no gradient) before being used as references.
    """
    torch.manual_seed(cfg.seed)
    keyframe_coder.eval()
    for p in keyframe_coder.parameters():
        p.requires_grad_(False)
    # the pretrained flow estimator stays frozen too: under the joint
    # rate-distortion gradient it drifts toward predicting zero flow (the
    # residual path compensates for any misalignment), which disables
    # motion compensation entirely
    for p in model.flow_net.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=cfg.lr_init)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=1.0 / cfg.lr_decay_factor, patience=cfg.plateau_patience)
    model.train()
    for it in range(cfg.max_iters):
        past, middle, future = triplet_batch(cfg.seed, it, cfg.batch_size, cfg.crop)
        if cfg.endpoint_mode == "decoded":
            with torch.no_grad():
                past = _decode_endpoint(keyframe_coder, past)
                future = _decode_endpoint(keyframe_coder, future)
        out = bstep_rd_forward(model, past, middle, future, mode="train")
        d = distortion_term(out["recon"], middle, cfg)
        loss = cfg.lam * cfg.distortion_scale * d + out["rate_flow"] + out["rate_residual"]
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"bidirectional training diverged at iteration {it}: "
                f"D={float(d)} Rf={float(out['rate_flow'])} Rr={float(out['rate_residual'])}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step(float(loss.detach()))
        _log_line(log_file, {
            "iter": it, "L": _f(loss), "D": _f(d),
            "R_flow": _f(out["rate_flow"]),
            "R_residual": _f(out["rate_residual"]),
            "lr": opt.param_groups[0]["lr"],
        })
    model.eval()


def _decode_endpoint(coder: TransformCoder, x: torch.Tensor) -> torch.Tensor:
    out = coder(x, mode="infer")
    return torch.clamp(out["x_hat"], 0.0, 1.0)


def save_bframe_checkpoint(path: str, model: BFrameModel, cfg: TrainConfig,
                           lambda_id: int, lambda_grid=BFRAME_LAMBDA_GRID) -> None:
    save_checkpoint(path, model, asdict(model.cfg), extra={
        "train_config": asdict(cfg),
        "lambda_id": lambda_id,
        "lambda_grid": list(lambda_grid),
        "endpoint_mode": cfg.endpoint_mode,
    })


def save_keyframe_checkpoint(path: str, coder: TransformCoder, cfg: TrainConfig,
                             lambda_id: int, lambda_grid=KEYFRAME_LAMBDA_GRID) -> None:
    save_checkpoint(path, coder, {
        "in_channels": coder.cfg.in_channels,
        "out_channels": coder.cfg.out_channels,
        "filters": coder.cfg.filters,
        "latent_channels": coder.cfg.latent_channels,
        "hyper_channels": coder.cfg.hyper_channels,
        "context_model": coder.cfg.context_model,
    }, extra={
        "train_config": asdict(cfg),
        "lambda_id": lambda_id,
        "lambda_grid": list(lambda_grid),
    })


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(loss_fn, inputs: list[torch.Tensor], n_samples: int = 12,
                      step: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central finite
    differences over sampled coordinates of each input tensor."""
    for t in inputs:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        grad = t.grad.detach()
        scale = max(float(grad.abs().max()), 1e-6)
        flat = t.detach().reshape(-1)
        coords = rng.choice(flat.numel(), size=min(n_samples, flat.numel()), replace=False)
        for c in coords:
            with torch.no_grad():
                orig = float(flat[c])
                flat[c] = orig + step
                up = float(loss_fn())
                flat[c] = orig - step
                down = float(loss_fn())
                flat[c] = orig
            fd = (up - down) / (2 * step)
            an = float(grad.reshape(-1)[c])
            worst = max(worst, abs(an - fd) / scale)
    return worst


def grad_check(which: str = "all", seed: int = 0) -> dict[str, float]:
    """Finite-difference verification of every differentiable path, in
    double precision on tiny inputs. Returns max relative error per check.

    Constant (zero-variance) images are excluded: flow is unidentifiable
    on them.
    """
    torch.manual_seed(seed)
    results = {}

    def run(name, fn):
        if which in ("all", name):
            results[name] = fn(seed)
    run("warp", _check_warp)
    run("flow", _check_flow)
    run("resample", _check_resample)
    run("mask", _check_mask)
    run("coder", _check_coder)
    run("rate", _check_rate)
    run("msssim", _check_msssim)
    if not results:
        raise ValueError(f"unknown grad-check selector: {which}")
    return results


def _rand(shape, seed, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(shape, generator=g, dtype=torch.float64) - 0.5) * scale


def _check_warp(seed):
    img = _rand((1, 3, 8, 8), seed) + 0.5
    flw = _rand((1, 2, 8, 8), seed + 1, scale=1.6) + 0.23  # avoid integer kinks
    w = _rand((1, 3, 8, 8), seed + 2)

    def loss():
        return (backward_warp(img, flw) * w).sum()

    return finite_diff_check(loss, [img, flw])


def _check_flow(seed):
    from .flow import PyramidFlowNet
    net = PyramidFlowNet(2, 4).double()
    src = _rand((1, 3, 8, 8), seed) + 0.5
    ref = _rand((1, 3, 8, 8), seed + 1) + 0.5
    w = _rand((1, 2, 8, 8), seed + 2)

    def loss():
        return (net(src, ref) * w).sum()

    return finite_diff_check(loss, [src, ref])


def _check_resample(seed):
    from .resample import subsample_flow, upsample_flow
    x = _rand((1, 2, 8, 8), seed, scale=4.0)
    w = _rand((1, 2, 8, 8), seed + 1)

    def loss():
        return (upsample_flow(subsample_flow(x, 2), 2, 8, 8) * w).sum()

    return finite_diff_check(loss, [x])


def _check_mask(seed):
    from .compensation import MaskNet
    net = MaskNet((4, 8, 8)).double()
    a = _rand((1, 3, 8, 8), seed) + 0.5
    b = _rand((1, 3, 8, 8), seed + 1) + 0.5
    w = _rand((1, 1, 8, 8), seed + 2)

    def loss():
        m = net(a, b)
        return ((m * a + (1 - m) * b) * torch.cat([w, w, w], 1)).sum()

    return finite_diff_check(loss, [a, b])


def _check_coder(seed):
    from .coder import CoderConfig, TransformCoder, gaussian_bits
    coder = TransformCoder(CoderConfig(3, 3, 4, 4, 4)).double()
    x = _rand((1, 3, 16, 16), seed) + 0.5
    g = torch.Generator().manual_seed(seed + 9)

    # frozen quantization noise so the loss is deterministic
    y0 = coder.analysis(x.detach())
    uy = (torch.rand(y0.shape, generator=g, dtype=torch.float64) - 0.5)
    z0 = coder.hyper_analysis(y0)
    uz = (torch.rand(z0.shape, generator=g, dtype=torch.float64) - 0.5)

    def loss():
        y = coder.analysis(x)
        z = coder.hyper_analysis(y)
        y_hat = y + uy
        z_hat = z + uz
        mu, sigma = coder.entropy_params(z_hat, y_shape=y.shape[-2:])
        bits = gaussian_bits(y_hat, mu, sigma).sum() + coder.prior.bits(z_hat).sum()
        x_hat = coder.synthesis(y_hat)[:, :, :16, :16]
        return 100.0 * (x_hat - x).pow(2).mean() + bits / x.numel()

    return finite_diff_check(loss, [x])


def _check_rate(seed):
    from .coder import gaussian_bits
    y_hat = torch.round(_rand((2, 3, 4, 4), seed, scale=6.0))
    mu = _rand((2, 3, 4, 4), seed + 1, scale=4.0)
    sigma = 0.3 + _rand((2, 3, 4, 4), seed + 2).abs() * 3

    def loss():
        return gaussian_bits(y_hat, mu, sigma).sum()

    return finite_diff_check(loss, [mu, sigma])


def _check_msssim(seed):
    a = _rand((1, 3, 32, 32), seed, scale=0.5) + 0.5
    b = (a + _rand((1, 3, 32, 32), seed + 1, scale=0.2)).clamp(0.01, 0.99).detach()

    def loss():
        score, _ = ms_ssim_torch(a, b)
        return 1.0 - score

    return finite_diff_check(loss, [a])
