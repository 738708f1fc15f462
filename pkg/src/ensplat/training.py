"""Stage-2 training: losses, weighted sampling, and the sequential
optimization of the two deformation networks.

The rasterizer and the image losses have hand-derived backward passes;
both enter the autodiff tape as custom ops, so one ``backward`` call per
step propagates pixel gradients through blending, projection, and the
deformation MLPs down to network weights and (optionally) the canonical
attributes.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from . import metrics
from .deformnet import (ALL_HEADS, APPEARANCE_HEADS, ATTR_TO_HEAD, ParamVector,
                        SimDeformer, VisDeformer)
from .errors import ContractError, NumericError
from .gaussians import Camera
from .rasterizer import render_arrays, render_backward
from .synthdata import load_record_image, manifest_camera

ATTRS = ("mu", "log_scale", "rot", "sh", "opacity_logit")


def render_tensor(deformed: Dict[str, ad.Tensor], sh_degree: int, cam: Camera,
                  bg=(1.0, 1.0, 1.0), n_threads: int = 1):
    """Rasterize tape tensors into an image tensor with analytic backward.

    Returns (image tensor, aux dict); aux is filled with densification
    stats (screen gradients, visibility, radii) during the backward pass.
    """
    arrays = {a: deformed[a].data for a in ATTRS}
    fb = render_arrays(arrays, sh_degree, cam, bg=bg, n_threads=n_threads,
                       with_cache=True)
    aux_out: dict = {}

    def backward_fn(g):
        grads, aux = render_backward(fb.cache, g, n_threads=n_threads)
        aux_out.update(aux)
        aux_out["grad_mu"] = grads["mu"]
        return [grads[a] for a in ATTRS]

    img_t = ad.custom_op("render", fb.rgb, [deformed[a] for a in ATTRS], backward_fn)
    return img_t, aux_out


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_deform: float = 1e-4
    regularize_appearance: bool = False

    def __post_init__(self):
        if not (0.0 <= self.lambda_ssim <= 1.0):
            raise ContractError("lambda_ssim must lie in [0,1]")
        if self.lambda_deform < 0:
            raise ContractError("lambda_deform must be >= 0")


def loss_color(img_t: ad.Tensor, target: np.ndarray, lambda_ssim: float = 0.2) -> ad.Tensor:
    """(1-l)*L1 + l*(1-SSIM) as a scalar tape node."""
    target = np.asarray(target, dtype=np.float64)
    if img_t.data.shape != target.shape:
        raise ContractError(f"image {img_t.data.shape} vs target {target.shape}")
    x = img_t.data.astype(np.float64)
    l1, g_l1 = metrics.l1_with_grad(x, target)
    if lambda_ssim > 0:
        ss, g_ss = metrics.ssim_with_grad(x, target)
    else:
        ss, g_ss = 0.0, 0.0
    value = (1 - lambda_ssim) * l1 + lambda_ssim * (1 - ss)
    grad_img = (1 - lambda_ssim) * g_l1 - lambda_ssim * g_ss

    def backward_fn(g):
        return [g * grad_img]

    return ad.custom_op("loss_color", np.asarray(value, dtype=img_t.data.dtype),
                        (img_t,), backward_fn)


def loss_deform(offs: Dict[str, ad.Tensor], w: LossWeights) -> ad.Tensor:
    """Mean over Gaussians of squared offset norms (geometry heads; optionally
    appearance heads too)."""
    heads = ["mu", "scale", "rot"]
    if w.regularize_appearance:
        heads += list(APPEARANCE_HEADS)
    terms = []
    for name in heads:
        if name not in offs:
            continue
        t = offs[name]
        n = t.data.shape[0]
        terms.append(ad.scale(ad.tsum(ad.mul(t, t)), 1.0 / n))
    if not terms:
        return ad.Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def total_loss(img_t, target, offs, w: LossWeights) -> ad.Tensor:
    c = loss_color(img_t, target, w.lambda_ssim)
    if w.lambda_deform == 0:
        return c
    return ad.add(c, ad.scale(loss_deform(offs, w), w.lambda_deform))


class SamplerState:
    """Per-image EMA of the color loss; sampling weight = floor + EMA."""

    def __init__(self, n_images: int, decay: float = 0.9, floor: float = 0.05):
        if n_images < 1:
            raise ContractError("sampler needs at least one image")
        self.ema = np.zeros(n_images)
        self.decay = decay
        self.floor = floor

    def update(self, idx: int, loss: float) -> None:
        self.ema[idx] = self.decay * self.ema[idx] + (1 - self.decay) * loss

    def probabilities(self) -> np.ndarray:
        w = self.floor + self.ema
        return w / w.sum()

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.ema.size, p=self.probabilities()))


def sample_training_image(state: SamplerState, rng: np.random.Generator) -> int:
    return state.sample(rng)


@dataclass
class StageConfig:
    iterations: int = 5000
    lr: float = 1e-4
    lr_final_factor: float = 0.01
    canonical_lr_factor: float = 0.01     # vs 0.001: both readings exposed
    fsim_finetune_factor: float = 0.1     # isovalue-task stage-2 fine-tuning
    lambda_ssim: float = 0.2
    lambda_deform: float = 1e-4
    regularize_appearance: bool = False
    # train-time Gaussian jitter of the normalized condition; smooths the
    # learned parameter dependence when only a handful of conditions exist
    param_jitter: float = 0.0
    seed: int = 0
    n_threads: int = 1
    log_every: int = 50
    bg: tuple = (1.0, 1.0, 1.0)
    log_path: Optional[str] = None
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None


class TrainingSet:
    """Training records plus preloaded target images."""

    def __init__(self, manifest: dict, task: Optional[str] = None):
        self.manifest = manifest
        recs = [r for r in manifest["records"]
                if r["member_split"] == "train" and r["view_split"] == "train"
                and (task is None or r.get("vis_split", "train") == "train")]
        if task is not None:
            recs = [r for r in recs if r.get("task") == task]
        if not recs:
            raise ContractError("no training records match the requested task/splits")
        self.records = recs
        self.images = [load_record_image(manifest, r) for r in recs]
        self.cameras = {c["id"]: manifest_camera(manifest, c["id"])
                        for c in manifest["cameras"]}
        self.sim_bounds = np.asarray(manifest["parameters"]["simulation"]["bounds"],
                                     dtype=np.float64)
        vis = manifest["parameters"]["visualization"]
        self.vis_bounds = (np.asarray(vis["bounds"], dtype=np.float64)
                           if vis.get("bounds") else None)
        self.task = task

    def __len__(self):
        return len(self.records)

    def p_sim(self, rec) -> ParamVector:
        return ParamVector.from_raw(rec["p_sim"], self.sim_bounds, "simulation")

    def p_vis(self, rec) -> Optional[ParamVector]:
        if rec.get("p_vis") is None:
            return None
        kind = "tf_displacement" if rec["task"] == "tf" else "isovalue"
        return ParamVector.from_raw(rec["p_vis"], self.vis_bounds, kind)

    def camera(self, rec) -> Camera:
        return self.cameras[rec["camera"]]


def _progress(stage: str, it: int, total: int, loss: float, extra: dict = None):
    line = {"stage": stage, "iter": it, "total": total, "loss": round(loss, 6)}
    if extra:
        line.update(extra)
    print("PROGRESS " + json.dumps(line), file=sys.stderr, flush=True)


class _CsvLog:
    def __init__(self, path, fields):
        self.file = None
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.file = open(path, "w", newline="")
            self.writer = csv.writer(self.file)
            self.writer.writerow(fields)

    def row(self, values):
        if self.file:
            self.writer.writerow(values)
            self.file.flush()

    def close(self):
        if self.file:
            self.file.close()


def train_fsim(canonical, fsim: SimDeformer, dataset: TrainingSet, cfg: StageConfig):
    """Stage-2a: optimize the sim deformer jointly with a slow canonical
    fine-tune; hard examples sampled by loss EMA."""
    rng = np.random.default_rng(cfg.seed)
    weights = LossWeights(cfg.lambda_ssim, cfg.lambda_deform, cfg.regularize_appearance)
    opt = ad.Adam([
        {"params": fsim.parameters(), "lr": cfg.lr, "name": "deform"},
        {"params": canonical.parameters(), "lr": cfg.lr * cfg.canonical_lr_factor,
         "name": "canonical"},
    ])
    sampler = SamplerState(len(dataset))
    log = _CsvLog(cfg.log_path, ["iteration", "loss", "image_index"])
    losses = []
    t0 = time.time()
    for it in range(cfg.iterations):
        opt.set_lr_scale(ad.exp_decay(it, cfg.iterations, cfg.lr_final_factor))
        idx = sampler.sample(rng)
        rec = dataset.records[idx]
        target = dataset.images[idx]
        cam = dataset.camera(rec)
        p = dataset.p_sim(rec)
        if cfg.param_jitter > 0:
            p = ParamVector(np.clip(p.values + rng.normal(0, cfg.param_jitter, p.dim),
                                    0, 1), p.kind)
        with ad.Tape() as tape:
            deformed, offs, _zp = fsim.deform(canonical, p)
            img_t, _aux = render_tensor(deformed, canonical.sh_degree, cam,
                                        bg=cfg.bg, n_threads=cfg.n_threads)
            loss = total_loss(img_t, target, offs, weights)
        val = float(loss.data)
        if not np.isfinite(val):
            raise NumericError(f"stage-2a loss became non-finite at iteration {it}")
        opt.zero_grad()
        ad.backward(loss, tape)
        opt.step()
        sampler.update(idx, val)
        losses.append(val)
        log.row([it, val, idx])
        if cfg.log_every and it % cfg.log_every == 0:
            _progress("fsim", it, cfg.iterations, val,
                      {"elapsed_s": round(time.time() - t0, 1)})
    log.close()
    return {"iterations": cfg.iterations, "sampler": sampler, "losses": losses}


def train_fvis(canonical, fsim: SimDeformer, fvis: VisDeformer, dataset: TrainingSet,
               task: str, cfg: StageConfig):
    """Stage-2b: canonical frozen; for appearance tasks the sim deformer is
    frozen too, for geometry tasks it fine-tunes at a reduced rate."""
    if task not in ("tf", "isovalue"):
        raise ContractError(f"unknown task '{task}'")
    rng = np.random.default_rng(cfg.seed + 1)
    weights = LossWeights(cfg.lambda_ssim, cfg.lambda_deform,
                          regularize_appearance=(task == "tf") or cfg.regularize_appearance)
    groups = [{"params": fvis.parameters(), "lr": cfg.lr, "name": "vis"}]
    finetune_fsim = task == "isovalue"
    if finetune_fsim:
        groups.append({"params": fsim.parameters(),
                       "lr": cfg.lr * cfg.fsim_finetune_factor, "name": "sim"})
    opt = ad.Adam(groups)
    sampler = SamplerState(len(dataset))
    log = _CsvLog(cfg.log_path, ["iteration", "loss", "image_index"])
    losses = []
    t0 = time.time()
    for it in range(cfg.iterations):
        opt.set_lr_scale(ad.exp_decay(it, cfg.iterations, cfg.lr_final_factor))
        idx = sampler.sample(rng)
        rec = dataset.records[idx]
        target = dataset.images[idx]
        cam = dataset.camera(rec)
        p_sim = dataset.p_sim(rec)
        p_vis = dataset.p_vis(rec)
        if p_vis is None:
            raise ContractError("stage-2b record lacks visualization parameters")
        with ad.Tape() as tape:
            deformed1, offs1, z_p = fsim.deform(canonical, p_sim)
            if not finetune_fsim:
                # frozen stage-1 output: cut the graph below it
                deformed1 = {k: ad.Tensor(v.data) for k, v in deformed1.items()}
                z_p = ad.Tensor(z_p.data)
            deformed2, offs2 = fvis.deform(deformed1, z_p, p_vis)
            img_t, _aux = render_tensor(deformed2, canonical.sh_degree, cam,
                                        bg=cfg.bg, n_threads=cfg.n_threads)
            loss = total_loss(img_t, target, offs2, weights)
        val = float(loss.data)
        if not np.isfinite(val):
            raise NumericError(f"stage-2b loss became non-finite at iteration {it}")
        opt.zero_grad()
        # canonical is frozen: its params are not in the optimizer, and the
        # tape leaves their grads untouched by the update
        ad.backward(loss, tape)
        opt.step()
        sampler.update(idx, val)
        losses.append(val)
        log.row([it, val, idx])
        if cfg.log_every and it % cfg.log_every == 0:
            _progress("fvis", it, cfg.iterations, val,
                      {"elapsed_s": round(time.time() - t0, 1)})
    log.close()
    return {"iterations": cfg.iterations, "sampler": sampler, "losses": losses}
