"""Report generation: R-D tables and plots, per-frame GOP profiles,
BD-rate comparisons against anchors, and ablation A/B tables.

Anchors are external R-D points ingested from CSV with columns
{quality_label, bpp, psnr, msssim}. Output is CSV files plus static PNG
plots; without anchors the report degrades to R-D curves with no BD
columns.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricError, RDCurve, RDPoint, bd_rate_both

ANCHOR_COLUMNS = ["quality_label", "bpp", "psnr", "msssim"]
ABLATION_TOGGLES = ("subsampling", "temporal_prediction", "learned_mask", "context_model")


class ReportError(Exception):
    pass


def load_anchor_csv(path: str) -> RDCurve:
    """Read an anchor R-D curve from CSV {quality_label, bpp, psnr, msssim}."""
    points = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ANCHOR_COLUMNS:
            raise ReportError(
                f"anchor CSV {path} must have columns {ANCHOR_COLUMNS}, "
                f"got {reader.fieldnames}"
            )
        for i, row in enumerate(reader):
            try:
                points.append(RDPoint(
                    bpp=float(row["bpp"]), psnr=float(row["psnr"]),
                    msssim=float(row["msssim"]), label=row["quality_label"],
                ))
            except (TypeError, ValueError, MetricError) as e:
                raise ReportError(f"anchor CSV {path} row {i + 2}: {e}") from e
    try:
        return RDCurve(points)
    except MetricError as e:
        raise ReportError(f"anchor CSV {path}: {e}") from e


def write_rd_csv(path: str, curves: dict[str, RDCurve]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "label", "bpp", "psnr", "msssim"])
        for name, curve in curves.items():
            for p in curve.points:
                w.writerow([name, p.label, f"{p.bpp:.6f}", f"{p.psnr:.4f}", f"{p.msssim:.6f}"])


def plot_rd_curves(path: str, curves: dict[str, RDCurve], quality: str = "psnr") -> None:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name, curve in curves.items():
        r, q = curve.arrays(quality)
        ax.plot(r, q, marker="o", label=name)
    ax.set_xlabel("rate (bits/pixel)")
    ax.set_ylabel("PSNR (dB)" if quality == "psnr" else "MS-SSIM")
    ax.grid(True, alpha=0.4)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_bd_csv(path: str, curves: dict[str, RDCurve], anchors: dict[str, RDCurve],
                 quality: str = "psnr") -> list[dict]:
    rows = []
    for cname, curve in curves.items():
        for aname, anchor in anchors.items():
            bd = bd_rate_both(curve, anchor, quality)
            rows.append({
                "test": cname, "anchor": aname, "quality": quality,
                "bd_rate_pchip_pct": bd["pchip"],
                "bd_rate_polynomial_pct": bd.get("polynomial", ""),
            })
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else
                           ["test", "anchor", "quality", "bd_rate_pchip_pct",
                            "bd_rate_polynomial_pct"])
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return rows


def write_gop_profile(csv_path: str, png_path: str,
                      frame_stats: dict[str, list[dict]]) -> None:
    """Per-frame rate/quality profile in display order (one series per run)."""
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "frame", "level", "bpp_motion", "bpp_residual",
                    "bpp_total", "psnr", "msssim"])
        for name, stats in frame_stats.items():
            for s in sorted(stats, key=lambda s: s["frame"]):
                total = s["bpp_motion"] + s["bpp_residual"]
                w.writerow([name, s["frame"], s["level"], f"{s['bpp_motion']:.6f}",
                            f"{s['bpp_residual']:.6f}", f"{total:.6f}",
                            f"{s['psnr']:.4f}", f"{s['msssim']:.6f}"])
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, stats in frame_stats.items():
        ordered = sorted(stats, key=lambda s: s["frame"])
        xs = [s["frame"] for s in ordered]
        ys = [s["bpp_motion"] + s["bpp_residual"] for s in ordered]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel("frame (display order)")
    ax.set_ylabel("rate (bits/pixel)")
    ax.grid(True, alpha=0.4)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def ablation_table(results: dict[str, dict]) -> list[dict]:
    """One row per toggle: BD-rate of toggle-on vs toggle-off plus timing.

    `results` maps toggle name -> {"on": RDCurve, "off": RDCurve,
    optional "decode_time_on"/"decode_time_off"}; all four toggles must be
    present.
    """
    missing = [t for t in ABLATION_TOGGLES if t not in results]
    if missing:
        raise ReportError(f"ablation results missing toggles: {missing}")
    rows = []
    for toggle in ABLATION_TOGGLES:
        cell = results[toggle]
        bd = bd_rate_both(cell["on"], cell["off"])
        row = {
            "toggle": toggle,
            "bd_rate_on_vs_off_pct": bd["pchip"],
            "bd_rate_polynomial_pct": bd.get("polynomial", ""),
        }
        if "decode_time_on" in cell:
            row["decode_time_on_s"] = cell["decode_time_on"]
            row["decode_time_off_s"] = cell["decode_time_off"]
        rows.append(row)
    return rows


def write_ablation_csv(path: str, rows: list[dict]) -> None:
    names = sorted({k for r in rows for k in r}, key=lambda k: (k != "toggle", k))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def report(out_dir: str, curves: dict[str, RDCurve],
           frame_stats: dict[str, list[dict]] | None = None,
           anchors: dict[str, RDCurve] | None = None,
           ablation: dict[str, dict] | None = None,
           run_config: dict | None = None) -> dict:
    """Emit the full report into out_dir; returns a manifest of artifacts.

    With no anchors the BD table is omitted (degraded mode); the R-D
    curves and profiles are still produced.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"artifacts": [], "degraded_no_anchors": not anchors}

    def emit(name):
        manifest["artifacts"].append(name)
        return os.path.join(out_dir, name)

    write_rd_csv(emit("rd_curves.csv"), curves)
    plot_rd_curves(emit("rd_curves_psnr.png"), curves, "psnr")
    plot_rd_curves(emit("rd_curves_msssim.png"), curves, "msssim")
    if frame_stats:
        write_gop_profile(emit("gop_profile.csv"), emit("gop_profile.png"), frame_stats)
    if anchors:
        manifest["bd_rows"] = write_bd_csv(emit("bd_rates.csv"), curves, anchors)
    if ablation is not None:
        rows = ablation_table(ablation)
        write_ablation_csv(emit("ablation.csv"), rows)
        manifest["ablation_rows"] = rows
    if run_config is not None:
        with open(emit("run_config.json"), "w", encoding="utf-8") as fh:
            json.dump(run_config, fh, indent=2)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
