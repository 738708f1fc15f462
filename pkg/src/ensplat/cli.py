"""Command-line entry point wiring data generation, the two training
stages, offline rendering, evaluation, bundle packing, and serving."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfglib
from . import pngio
from .bundle import ModelBundle, build_meta
from .canonical import CanonicalConfig, DensifyPolicy, train_canonical
from .deformnet import DeformNetConfig, SimDeformer, VisDeformer
from .errors import ConfigError, EnsplatError
from .evaluation import REGIMES, run_eval, write_report
from .gaussians import GaussianField
from .synthdata import (DatasetSpec, SyntheticEnsemble, TransferFunction,
                        generate_dataset, icosphere_cameras, load_manifest)
from .training import StageConfig, TrainingSet, train_fsim, train_fvis


def _ensemble_from_config(cfg: dict) -> SyntheticEnsemble:
    s = cfglib.Section(cfg, "ensemble")
    return SyntheticEnsemble(
        sim_dim=s.int("sim_dim", 2), n_blobs=s.int("n_blobs", 4),
        seed=s.int("seed", 0), center_sens=s.float("center_sens", 1.6),
        amp_sens=s.float("amp_sens", 1.6), sigma_sens=s.float("sigma_sens", 0.9))


def cmd_gen_data(args) -> int:
    cfg = cfglib.load(args.config)
    ens = _ensemble_from_config(cfg)
    d = cfglib.Section(cfg, "data")
    cams = icosphere_cameras(
        d.int("icosphere_frequency", 2), d.float("radius", 3.2),
        width=d.int("width", 64), height=d.int("height", 64),
        focal=d.float("focal", 60.0))
    n_views = d.int("n_views", 0)
    if n_views:
        cams = cams[:n_views]
    task = d.str("task", "") or None
    if task not in (None, "tf", "isovalue"):
        raise ConfigError(f"data.task: unknown task {task!r}")
    vis_train = d.points("vis_train") if task == "tf" else d.floats("vis_train", "")
    vis_test = d.points("vis_test") if task == "tf" else d.floats("vis_test", "")
    train_points = d.points("train_points")
    if train_points.size == 0:
        raise ConfigError("data.train_points is required")
    sim_bounds = d.points("sim_bounds")
    spec = DatasetSpec(
        ensemble=ens,
        sim_points_train=train_points,
        sim_points_test=d.points("test_points"),
        cameras=cams, width=d.int("width", 64), height=d.int("height", 64),
        task=task,
        vis_train=list(vis_train) if vis_train is not None else [],
        vis_test=list(vis_test) if vis_test is not None else [],
        tf_member_subsample=d.float("tf_member_subsample", 1.0),
        sim_bounds=[list(b) for b in sim_bounds] if sim_bounds.size else None,
        sim_names=(d.str("sim_names", "") or "").split() or None,
        seed=d.int("seed", 0),
    )
    manifest = generate_dataset(spec, args.out)
    print(f"wrote {len(manifest['records'])} images under {args.out}")
    return 0


def _canonical_config(cfg: dict, threads: int) -> CanonicalConfig:
    c = cfglib.Section(cfg, "canonical")
    return CanonicalConfig(
        iterations=c.int("iterations", 3000),
        n_init=c.int("n_init", 3000),
        sh_degree=c.int("sh_degree", 1),
        lr_mu=c.float("lr_mu", 1.6e-4),
        lr_mu_final_factor=c.float("lr_mu_final_factor", 0.01),
        lr_sh=c.float("lr_sh", 2.5e-3),
        lr_opacity=c.float("lr_opacity", 0.05),
        lr_scale=c.float("lr_scale", 5e-3),
        lr_rot=c.float("lr_rot", 1e-3),
        lambda_ssim=c.float("lambda_ssim", 0.2),
        seed=c.int("seed", 0),
        n_threads=threads,
        log_every=c.int("log_every", 100),
        log_path=c.str("log_path"),
        densify=DensifyPolicy(
            grad_threshold=c.float("densify_grad_threshold", 1e-4),
            interval=c.int("densify_interval", 100),
            opacity_prune_threshold=c.float("opacity_prune_threshold", 0.005),
            split_scale_threshold=c.float("split_scale_threshold", 0.01),
            max_gaussians=c.int("max_gaussians", 20000),
            start_iteration=c.int("densify_start", 300),
            stop_fraction=c.float("densify_stop_fraction", 0.7),
        ))


def _net_config(cfg: dict, section: str, sh_dim: int, has_backbone: bool,
                heads=None) -> DeformNetConfig:
    s = cfglib.Section(cfg, section)
    kwargs = dict(
        feat_dim=s.int("feat_dim", 128),
        hidden_dim=s.int("hidden_dim", 512),
        pe_freqs_spatial=s.int("pe_freqs_spatial", 10),
        pe_freqs_param=s.int("pe_freqs_param", 6),
        sh_dim=sh_dim, has_backbone=has_backbone,
        head_hidden=s.int("head_hidden", None),
        cond_hidden=s.int("cond_hidden", None),
    )
    if heads is not None:
        kwargs["enabled_heads"] = heads
    return DeformNetConfig(**kwargs)


def _stage_config(cfg: dict, section: str, threads: int) -> StageConfig:
    s = cfglib.Section(cfg, section)
    return StageConfig(
        iterations=s.int("iterations", 5000),
        lr=s.float("lr", 1e-4),
        lr_final_factor=s.float("lr_final_factor", 0.01),
        canonical_lr_factor=s.float("canonical_lr_factor", 0.01),
        fsim_finetune_factor=s.float("fsim_finetune_factor", 0.1),
        lambda_ssim=s.float("lambda_ssim", 0.2),
        lambda_deform=s.float("lambda_deform", 1e-4),
        regularize_appearance=bool(s.bool("regularize_appearance", False)),
        seed=s.int("seed", 0),
        n_threads=threads,
        log_every=s.int("log_every", 100),
        log_path=s.str("log_path"),
    )


def cmd_train_canonical(args) -> int:
    cfg = cfglib.load(args.config)
    manifest = load_manifest(args.data)
    dataset = TrainingSet(manifest)
    ccfg = _canonical_config(cfg, args.threads)
    ens = _ensemble_from_config(cfg)
    train_pts = np.array([r["p_sim"] for r in manifest["records"]
                          if r["member_split"] == "train"])
    rep = train_pts[np.argmin(((train_pts - 0.5) ** 2).sum(axis=1))]
    fld, _history = train_canonical(dataset, ccfg, init_field_fn=ens.field_fn(rep),
                                    init_tf=TransferFunction.base())
    bundle = ModelBundle(fld, None, {}, build_meta(manifest))
    bundle.save(args.out)
    print(f"canonical field: {fld.n} Gaussians -> {args.out}")
    return 0


def cmd_train_sim(args) -> int:
    cfg = cfglib.load(args.config)
    manifest = load_manifest(args.data)
    dataset = TrainingSet(manifest)
    ckpt = ModelBundle.load(args.canonical)
    fld = ckpt.canonical
    sim_dim = len(manifest["parameters"]["simulation"]["bounds"])
    netcfg = _net_config(cfg, "sim", 3 * (fld.sh_degree + 1) ** 2, has_backbone=True)
    s = cfglib.Section(cfg, "sim")
    fsim = SimDeformer(netcfg, sim_dim, seed=s.int("net_seed", 1))
    train_fsim(fld, fsim, dataset, _stage_config(cfg, "sim", args.threads))
    meta = build_meta(manifest, fsim=fsim)
    ModelBundle(fld, fsim, {}, meta).save(args.out)
    print(f"sim deformer trained -> {args.out}")
    return 0


def cmd_train_vis(args) -> int:
    cfg = cfglib.load(args.config)
    manifest = load_manifest(args.data)
    if manifest.get("task") != args.task:
        raise ConfigError(f"manifest task {manifest.get('task')!r} does not match "
                          f"--task {args.task!r}")
    dataset = TrainingSet(manifest, task=args.task)
    ckpt = ModelBundle.load(args.sim)
    if ckpt.fsim is None:
        raise ConfigError("--sim checkpoint lacks a trained sim deformer")
    heads = ("sh", "opacity") if args.task == "tf" else None
    netcfg = _net_config(cfg, "vis", 3 * (ckpt.canonical.sh_degree + 1) ** 2,
                         has_backbone=False, heads=heads)
    kind = "tf_displacement" if args.task == "tf" else "isovalue"
    s = cfglib.Section(cfg, "vis")
    fvis = VisDeformer(netcfg, kind, seed=s.int("net_seed", 2))
    train_fvis(ckpt.canonical, ckpt.fsim, fvis, dataset, args.task,
               _stage_config(cfg, "vis", args.threads))
    fvis_map = dict(ckpt.fvis)
    fvis_map[args.task] = fvis
    meta = build_meta(manifest, fsim=ckpt.fsim, fvis=fvis_map)
    # keep task entries from the sim checkpoint's manifest-agnostic meta
    for task, entry in ckpt.meta.get("tasks", {}).items():
        meta["tasks"].setdefault(task, entry)
    for key, entry in ckpt.meta.get("networks", {}).items():
        meta["networks"].setdefault(key, entry)
    ModelBundle(ckpt.canonical, ckpt.fsim, fvis_map, meta).save(args.out)
    print(f"vis deformer ({args.task}) trained -> {args.out}")
    return 0


def _parse_floats(text: str) -> list:
    return [float(x) for x in text.replace(",", " ").split()]


def cmd_render(args) -> int:
    bundle = ModelBundle.load(args.bundle)
    cam_vals = _parse_floats(args.camera)
    if len(cam_vals) != 3:
        raise ConfigError("--camera expects azimuth,elevation,radius")
    camera = {"azimuth": cam_vals[0], "elevation": cam_vals[1], "radius": cam_vals[2]}
    img, clamped = bundle.render(camera, _parse_floats(args.psim), task=args.task,
                                 p_vis_raw=_parse_floats(args.pvis) if args.pvis else None,
                                 n_threads=args.threads)
    pngio.save_png(args.out, img)
    if args.raw_out:
        pngio.save_raw_f32(args.raw_out, img)
    if clamped:
        print("warning: parameters were clamped to declared bounds", file=sys.stderr)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    bundle = ModelBundle.load(args.bundle)
    manifest = load_manifest(args.manifest)
    report = run_eval(bundle, manifest, args.regime, n_threads=args.threads,
                      with_baseline=args.baseline)
    write_report(report, args.report)
    s = report["summary"]
    print(json.dumps(s, indent=1))
    if args.psnr_floor is not None and s.get("psnr_mean", 0.0) < args.psnr_floor:
        print(f"PSNR floor violated: {s.get('psnr_mean'):.2f} < {args.psnr_floor}",
              file=sys.stderr)
        return 1
    return 0


def cmd_pack(args) -> int:
    base = ModelBundle.load(args.canonical)
    sim = ModelBundle.load(args.sim) if args.sim else base
    fvis, meta_tasks, meta_nets = {}, {}, {}
    for spec in args.vis or []:
        task, _, path = spec.partition("=")
        if not path:
            raise ConfigError(f"--vis expects task=path, got {spec!r}")
        vb = ModelBundle.load(path)
        if task not in vb.fvis:
            raise ConfigError(f"bundle {path} has no weights for task {task!r}")
        fvis[task] = vb.fvis[task]
        meta_tasks[task] = vb.meta["tasks"][task]
        meta_nets[f"vis_{task}"] = vb.meta["networks"][f"vis_{task}"]
    meta = dict(sim.meta)
    meta["tasks"] = {**meta.get("tasks", {}), **meta_tasks}
    meta["networks"] = {**meta.get("networks", {}), **meta_nets}
    ModelBundle(base.canonical, sim.fsim, fvis, meta).save(args.out)
    print(f"packed bundle -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    from .server import serve
    serve(args.bundle, bind=args.bind, workers=args.workers,
          threads_per_render=args.threads)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensplat",
        description="Deformable Gaussian-splatting surrogate for ensemble exploration")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for rendering")
        return p

    p = add("gen-data", cmd_gen_data, help="render a synthetic training dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("train-canonical", cmd_train_canonical, help="stage-1 canonical field")
    p.add_argument("--data", required=True, help="manifest.json path")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("train-sim", cmd_train_sim, help="stage-2a simulation deformer")
    p.add_argument("--canonical", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("train-vis", cmd_train_vis, help="stage-2b visualization deformer")
    p.add_argument("--sim", required=True)
    p.add_argument("--task", required=True, choices=["tf", "isovalue"])
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("render", cmd_render, help="render one parameter point to PNG")
    p.add_argument("--bundle", required=True)
    p.add_argument("--camera", required=True, help="azimuth,elevation,radius")
    p.add_argument("--psim", required=True, help="comma-separated raw parameters")
    p.add_argument("--task", default=None)
    p.add_argument("--pvis", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--raw-out", default=None, help="also dump raw f32 framebuffer")

    p = add("eval", cmd_eval, help="run a test-split evaluation regime")
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--regime", required=True, choices=list(REGIMES))
    p.add_argument("--report", required=True)
    p.add_argument("--baseline", action="store_true",
                   help="include the nearest-training-member baseline")
    p.add_argument("--psnr-floor", type=float, default=None,
                   help="exit nonzero when mean PSNR falls below this")

    p = add("pack", cmd_pack, help="assemble a serving bundle from checkpoints")
    p.add_argument("--canonical", required=True)
    p.add_argument("--sim", default=None)
    p.add_argument("--vis", action="append", help="task=checkpoint, repeatable")
    p.add_argument("--out", required=True)

    p = add("serve", cmd_serve, help="serve a bundle over HTTP")
    p.add_argument("--bundle", required=True)
    p.add_argument("--bind", default="127.0.0.1:8080")
    p.add_argument("--workers", type=int, default=0, help="0 = core count")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EnsplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
