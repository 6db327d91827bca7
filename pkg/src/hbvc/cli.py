"""Command-line entry points.

Subcommands: pretrain-keyframe, train, encode, decode, eval, ablate,
grad-check, dump-plan. Exit codes: 0 success, 1 usage/config error,
2 data error, 3 numerical failure. HBVC_DEVICE overrides the compute
device (default cpu).
"""

from __future__ import annotations

import json
import os
import sys

import click
import torch

from .config import ConfigError, RunConfig, load_config
from .frames import SequenceError, load_sequence, save_sequence, VideoSequence
from .gop import PlanError, build_plan, format_plan
from .metrics import MetricError, RDCurve, RDPoint
from .models import (
    BFrameModel,
    load_bframe_model,
    load_keyframe_coder,
    make_keyframe_coder,
)
from .pipeline import PipelineError, decode_video, encode_video
from .rangecoder import StreamCorruptError
from .reporting import ReportError, ablation_table, load_anchor_csv, report, write_ablation_csv
from .training import (
    BFRAME_LAMBDA_GRID,
    KEYFRAME_LAMBDA_GRID,
    TrainingDiverged,
    pretrain_flow,
    pretrain_keyframe_coder,
    save_bframe_checkpoint,
    save_keyframe_checkpoint,
    train_bidirectional,
    grad_check,
)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

_USAGE_ERRORS = (ConfigError, click.ClickException, click.UsageError)
_DATA_ERRORS = (SequenceError, StreamCorruptError, PipelineError, PlanError,
                ReportError, MetricError, FileNotFoundError, IsADirectoryError,
                ValueError, KeyError)
_NUMERICAL_ERRORS = (TrainingDiverged, FloatingPointError)


def _device() -> torch.device:
    return torch.device(os.environ.get("HBVC_DEVICE", "cpu"))


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


@click.group()
def cli():
    """Hierarchical bi-directional learned video codec."""


@cli.command("pretrain-keyframe")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--lambda-id", type=int, default=None,
              help="Index into the keyframe lambda grid (overrides train.lam).")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--log", "log_path", type=click.Path(), default=None)
def cmd_pretrain_keyframe(config_path, lambda_id, out_path, log_path):
    """Train the intra coder at one lambda and write a checkpoint."""
    cfg = _load_run_config(config_path)
    tcfg = cfg.train
    lam_id = 0
    if lambda_id is not None:
        if not 0 <= lambda_id < len(KEYFRAME_LAMBDA_GRID):
            raise ConfigError(f"lambda-id must be in [0, {len(KEYFRAME_LAMBDA_GRID)})")
        lam_id = lambda_id
        tcfg = type(tcfg)(**{**tcfg.__dict__, "lam": KEYFRAME_LAMBDA_GRID[lambda_id]})
    coder = make_keyframe_coder(cfg.keyframe.filters, cfg.keyframe.latent,
                                cfg.keyframe.hyper).to(_device())
    with _maybe_log(log_path) as log:
        pretrain_keyframe_coder(coder, tcfg, log_file=log)
    save_keyframe_checkpoint(out_path, coder, tcfg, lam_id)
    click.echo(f"keyframe checkpoint written to {out_path}")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--keyframe-ckpt", type=click.Path(exists=True), required=True)
@click.option("--lambda-id", type=int, default=None,
              help="Index into the B-frame lambda grid (overrides train.lam).")
@click.option("--pretrain-flow-iters", type=int, default=0,
              help="Supervised flow pretraining iterations before joint training.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--log", "log_path", type=click.Path(), default=None)
def cmd_train(config_path, keyframe_ckpt, lambda_id, pretrain_flow_iters,
              out_path, log_path):
    """Jointly train the B-frame model against a frozen keyframe coder."""
    cfg = _load_run_config(config_path)
    tcfg = cfg.train
    lam_id = 0
    if lambda_id is not None:
        if not 0 <= lambda_id < len(BFRAME_LAMBDA_GRID):
            raise ConfigError(f"lambda-id must be in [0, {len(BFRAME_LAMBDA_GRID)})")
        lam_id = lambda_id
        tcfg = type(tcfg)(**{**tcfg.__dict__, "lam": BFRAME_LAMBDA_GRID[lambda_id]})
    keyframe_coder, _ = load_keyframe_coder(keyframe_ckpt)
    model = BFrameModel(cfg.model).to(_device())
    with _maybe_log(log_path) as log:
        if pretrain_flow_iters > 0:
            pretrain_flow(model.flow_net, iters=pretrain_flow_iters,
                          seed=tcfg.seed, log_file=log)
        train_bidirectional(model, keyframe_coder, tcfg, log_file=log)
    save_bframe_checkpoint(out_path, model, tcfg, lam_id)
    click.echo(f"model checkpoint written to {out_path}")


@cli.command("encode")
@click.option("--input", "input_path", type=click.Path(exists=True), required=True)
@click.option("--format", "fmt", type=click.Choice(["png_sequence", "raw_rgb24"]),
              default="png_sequence")
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--keyframe-ckpt", type=click.Path(exists=True), required=True)
@click.option("--model-ckpt", type=click.Path(exists=True), required=True)
@click.option("--gop", type=int, default=None, help="GOP size (default from config).")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--stats", "stats_path", type=click.Path(), default=None)
def cmd_encode(input_path, fmt, width, height, keyframe_ckpt, model_ckpt, gop,
               config_path, out_path, stats_path):
    """Encode a frame sequence into a bitstream plus a per-frame log."""
    cfg = _load_run_config(config_path)
    gop_size = gop if gop is not None else cfg.codec.gop_size
    seq = load_sequence(input_path, fmt=fmt, width=width, height=height)
    keyframe_coder, _ = load_keyframe_coder(keyframe_ckpt)
    model, extra = load_bframe_model(model_ckpt)
    data, stats = encode_video(seq, keyframe_coder, model,
                               lambda_id=extra.get("lambda_id", 0),
                               gop_size=gop_size)
    with open(out_path, "wb") as fh:
        fh.write(data)
    summary = _encode_summary(seq, data, stats, extra)
    if stats_path:
        with open(stats_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
    click.echo(f"{len(data)} bytes, {summary['bpp']:.4f} bpp, "
               f"{summary['psnr']:.2f} dB -> {out_path}")


def _encode_summary(seq: VideoSequence, data: bytes, stats: list[dict],
                    extra: dict) -> dict:
    pixels = seq.width * seq.height * len(seq)
    return {
        "bpp": 8 * len(data) / pixels,
        "psnr": sum(s["psnr"] for s in stats) / len(stats),
        "msssim": sum(s["msssim"] for s in stats) / len(stats),
        "lambda_id": extra.get("lambda_id", 0),
        "frames": stats,
    }


@cli.command("decode")
@click.option("--input", "input_path", type=click.Path(exists=True), required=True)
@click.option("--keyframe-ckpt", type=click.Path(exists=True), required=True)
@click.option("--model-ckpt", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_decode(input_path, keyframe_ckpt, model_ckpt, out_dir):
    """Decode a bitstream into a PNG frame sequence."""
    with open(input_path, "rb") as fh:
        data = fh.read()
    keyframe_coder, _ = load_keyframe_coder(keyframe_ckpt)
    model, _ = load_bframe_model(model_ckpt)
    seq = decode_video(data, keyframe_coder, model)
    os.makedirs(out_dir, exist_ok=True)
    paths = save_sequence(seq, out_dir)
    click.echo(f"decoded {len(paths)} frames into {out_dir}")


@cli.command("eval")
@click.option("--stats", "stats_paths", type=(str, click.Path(exists=True)),
              multiple=True, required=True,
              help="Repeated (label, stats.json) pairs forming one R-D curve.")
@click.option("--curve-name", default="codec")
@click.option("--anchor", "anchor_paths", type=(str, click.Path(exists=True)),
              multiple=True, help="Repeated (name, anchor.csv) pairs.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_eval(stats_paths, curve_name, anchor_paths, out_dir):
    """Aggregate encode stats into R-D curves, BD tables and plots."""
    points = []
    frame_stats = {}
    for label, path in stats_paths:
        with open(path, "r", encoding="utf-8") as fh:
            s = json.load(fh)
        points.append(RDPoint(bpp=s["bpp"], psnr=s["psnr"], msssim=s["msssim"],
                              label=label))
        frame_stats[f"{curve_name}/{label}"] = s["frames"]
    curves = {curve_name: RDCurve(points)}
    anchors = {name: load_anchor_csv(path) for name, path in anchor_paths}
    manifest = report(out_dir, curves, frame_stats=frame_stats,
                      anchors=anchors or None)
    click.echo(f"report written to {out_dir} ({len(manifest['artifacts'])} artifacts)")


@cli.command("ablate")
@click.option("--matrix", "matrix_path", type=click.Path(exists=True), required=True,
              help="JSON: {toggle: {on: [stats.json...], off: [stats.json...]}}.")
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_ablate(matrix_path, out_path):
    """Build the 4-toggle ablation table from paired encode stats."""
    with open(matrix_path, "r", encoding="utf-8") as fh:
        matrix = json.load(fh)
    results = {}
    for toggle, arms in matrix.items():
        cell = {}
        for arm in ("on", "off"):
            pts = []
            for p in arms[arm]:
                with open(p, "r", encoding="utf-8") as fh:
                    s = json.load(fh)
                pts.append(RDPoint(bpp=s["bpp"], psnr=s["psnr"], msssim=s["msssim"]))
            cell[arm] = RDCurve(pts)
        for key in ("decode_time_on", "decode_time_off"):
            if key in arms:
                cell[key] = arms[key]
        results[toggle] = cell
    rows = ablation_table(results)
    write_ablation_csv(out_path, rows)
    for row in rows:
        click.echo(f"{row['toggle']}: {row['bd_rate_on_vs_off_pct']:+.2f}% BD-rate (on vs off)")


@cli.command("grad-check")
@click.option("--which", default="all")
@click.option("--tolerance", type=float, default=1e-3)
@click.option("--seed", type=int, default=0)
def cmd_grad_check(which, tolerance, seed):
    """Verify analytic gradients against finite differences."""
    results = grad_check(which, seed=seed)
    failed = False
    for name, err in results.items():
        status = "ok" if err < tolerance else "FAIL"
        if err >= tolerance:
            failed = True
        click.echo(f"{name:10s} max rel err {err:.3e}  {status}")
    if failed:
        raise TrainingDiverged("gradient check exceeded tolerance")


@cli.command("dump-plan")
@click.option("--gop", type=int, default=8)
def cmd_dump_plan(gop):
    """Print the hierarchical coding schedule for one GOP."""
    click.echo(format_plan(build_plan(gop)))


class _maybe_log:
    def __init__(self, path):
        self.path = path
        self.fh = None

    def __enter__(self):
        if self.path is not None:
            self.fh = open(self.path, "w", encoding="utf-8")
        return self.fh

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()
        return False


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except _NUMERICAL_ERRORS as e:
        click.echo(f"numerical failure: {e}", err=True)
        return EXIT_NUMERICAL
    except _USAGE_ERRORS as e:
        click.echo(f"usage error: {e}", err=True)
        return EXIT_USAGE
    except _DATA_ERRORS as e:
        click.echo(f"data error: {e}", err=True)
        return EXIT_DATA
    except SystemExit as e:
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
