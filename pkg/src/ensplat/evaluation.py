"""Experiment runner: renders a bundle against manifest test splits and
aggregates PSNR/SSIM into CSV and markdown reports."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics
from .bundle import ModelBundle
from .errors import ConfigError
from .rasterizer import render_arrays
from .synthdata import load_record_image, manifest_camera

REGIMES = ("novel_view", "unseen_sim", "unseen_tf", "unseen_iso", "joint")


def regime_records(manifest: dict, regime: str) -> list:
    recs = manifest["records"]
    if regime == "novel_view":
        sel = [r for r in recs if r["member_split"] == "train" and r["view_split"] == "test"
               and r.get("vis_split", "train") == "train"]
    elif regime == "unseen_sim":
        sel = [r for r in recs if r["member_split"] == "test" and r["view_split"] == "train"
               and r.get("vis_split", "train") == "train"]
    elif regime == "unseen_tf":
        sel = [r for r in recs if r.get("task") == "tf" and r.get("vis_split") == "test"
               and r["member_split"] == "train" and r["view_split"] == "train"]
    elif regime == "unseen_iso":
        sel = [r for r in recs if r.get("task") == "isovalue" and r.get("vis_split") == "test"
               and r["view_split"] == "train"]
    elif regime == "joint":
        sel = [r for r in recs if r["member_split"] == "test" and r["view_split"] == "test"
               and r.get("vis_split", "train") == "train"]
    else:
        raise ConfigError(f"unknown regime '{regime}' (choose from {REGIMES})")
    return sel


def _require_task(bundle: ModelBundle, regime: str) -> Optional[str]:
    task = {"unseen_tf": "tf", "unseen_iso": "isovalue"}.get(regime)
    if task is not None and task not in bundle.fvis:
        raise ConfigError(f"regime '{regime}' needs a bundle trained for task '{task}'")
    return task


def run_eval(bundle: ModelBundle, manifest: dict, regime: str,
             n_threads: int = 1, with_baseline: bool = False) -> dict:
    """Render every record of the regime's test split; per-image PSNR/SSIM.

    ``with_baseline`` additionally renders each unseen-sim record at the
    nearest *training* member's parameters (the nearest-member baseline).
    """
    task = _require_task(bundle, regime)
    records = regime_records(manifest, regime)
    rows = []
    train_pts = None
    if with_baseline:
        train_pts = np.unique(np.array([r["p_sim"] for r in manifest["records"]
                                        if r["member_split"] == "train"]), axis=0)
    for rec in records:
        cam = manifest_camera(manifest, rec["camera"])
        target = load_record_image(manifest, rec)
        arrays, _ = bundle.deformed_arrays(rec["p_sim"], task=rec.get("task") if task else None,
                                           p_vis_raw=rec.get("p_vis") if task else None)
        img = render_arrays(arrays, bundle.canonical.sh_degree, cam,
                            n_threads=n_threads).rgb
        row = {
            "member": rec["member"], "camera": rec["camera"],
            "vis_id": rec.get("vis_id"),
            "psnr": metrics.psnr(img, target), "ssim": metrics.ssim(img, target),
        }
        if with_baseline and train_pts is not None and len(train_pts):
            p = np.asarray(rec["p_sim"])
            nearest = train_pts[np.argmin(((train_pts - p) ** 2).sum(axis=1))]
            base_arrays, _ = bundle.deformed_arrays(nearest)
            base_img = render_arrays(base_arrays, bundle.canonical.sh_degree, cam,
                                     n_threads=n_threads).rgb
            row["baseline_psnr"] = metrics.psnr(base_img, target)
        rows.append(row)
    return {"regime": regime, "rows": rows, "summary": summarize(rows)}


def summarize(rows: list) -> dict:
    if not rows:
        return {"count": 0}
    ps = np.array([r["psnr"] for r in rows])
    ss = np.array([r["ssim"] for r in rows])
    finite = ps[np.isfinite(ps)]
    out = {
        "count": len(rows),
        "psnr_mean": float(finite.mean()) if finite.size else float("inf"),
        "psnr_std": float(finite.std()) if finite.size else 0.0,
        "ssim_mean": float(ss.mean()),
        "ssim_std": float(ss.std()),
    }
    if any("baseline_psnr" in r for r in rows):
        bs = np.array([r["baseline_psnr"] for r in rows if "baseline_psnr" in r])
        out["baseline_psnr_mean"] = float(bs[np.isfinite(bs)].mean())
    return out


def write_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = report["rows"]
    fields = ["member", "camera", "vis_id", "psnr", "ssim"]
    if any("baseline_psnr" in r for r in rows):
        fields.append("baseline_psnr")
    with open(out / f"{report['regime']}.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k) for k in fields})
    s = report["summary"]
    lines = [
        f"# Evaluation: {report['regime']}",
        "",
        "| metric | mean | std |",
        "|--------|------|-----|",
        f"| PSNR (dB) | {s.get('psnr_mean', float('nan')):.2f} | {s.get('psnr_std', 0):.2f} |",
        f"| SSIM | {s.get('ssim_mean', float('nan')):.4f} | {s.get('ssim_std', 0):.4f} |",
    ]
    if "baseline_psnr_mean" in s:
        lines.append(f"| nearest-member baseline PSNR (dB) | {s['baseline_psnr_mean']:.2f} | |")
    lines += ["", f"images evaluated: {s['count']}"]
    (out / f"{report['regime']}.md").write_text("\n".join(lines) + "\n")
