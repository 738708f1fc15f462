"""Stage-1 canonical field construction: density-weighted initialization,
photometric optimization over randomly sampled ensemble views, and periodic
adaptive density control (prune / clone / split)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import metrics
from .errors import ContractError, NumericError
from .gaussians import GaussianField, rgb_to_sh_dc, sh_dim
from .rasterizer import DensifyStats, render_backward
from .synthdata import SCENE_BOUND, TransferFunction, colormap
from .training import ATTRS, TrainingSet, _CsvLog, _progress, loss_color, render_tensor


@dataclass
class DensifyPolicy:
    grad_threshold: float = 1e-4
    interval: int = 100
    opacity_prune_threshold: float = 0.005
    split_scale_threshold: float = 0.01   # fraction of scene extent
    max_gaussians: int = 20000
    start_iteration: int = 300
    stop_fraction: float = 0.7            # no densification after this point

    def __post_init__(self):
        if self.interval < 1:
            raise ContractError("densify interval must be >= 1")
        if min(self.grad_threshold, self.opacity_prune_threshold,
               self.split_scale_threshold) <= 0:
            raise ContractError("densify thresholds must be positive")


@dataclass
class CanonicalConfig:
    iterations: int = 3000
    n_init: int = 2000
    sh_degree: int = 1
    lr_mu: float = 1.6e-4                  # scaled by scene extent
    lr_mu_final_factor: float = 0.01
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rot: float = 1e-3
    lambda_ssim: float = 0.2
    seed: int = 0
    n_threads: int = 1
    bg: tuple = (1.0, 1.0, 1.0)
    log_every: int = 50
    log_path: Optional[str] = None
    densify: DensifyPolicy = None

    def __post_init__(self):
        if self.densify is None:
            self.densify = DensifyPolicy()


def init_from_volume(field_fn, tf: TransferFunction, n_points: int, seed: int = 0,
                     sh_degree: int = 1, bound: float = SCENE_BOUND,
                     max_batches: int = 2000) -> GaussianField:
    """Rejection-sample positions with acceptance probability equal to the
    TF-mapped opacity of the field; colors come from the color table at the
    sampled scalar value."""
    if n_points < 1:
        raise ContractError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    pts, vals = [], []
    have = 0
    for _ in range(max_batches):
        cand = rng.uniform(-bound, bound, (max(4 * n_points, 512), 3))
        v = field_fn(cand)
        accept = rng.uniform(size=cand.shape[0]) < tf.opacity(v)
        if accept.any():
            pts.append(cand[accept])
            vals.append(v[accept])
            have += int(accept.sum())
        if have >= n_points:
            break
    if have < n_points:
        raise NumericError("initialization failed: field opacity is (near) zero everywhere")
    pts = np.concatenate(pts)[:n_points]
    vals = np.concatenate(vals)[:n_points]

    if n_points == 1:
        nn = np.full(1, 0.2 * bound)
    else:
        tree = cKDTree(pts)
        k = min(4, n_points)
        dists, _ = tree.query(pts, k=k)
        nn = dists[:, 1:].mean(axis=1)
    nn = np.clip(nn, 1e-4 * bound, 0.5 * bound)

    rgb = colormap(vals)
    B = sh_dim(sh_degree)
    coeffs = np.zeros((n_points, 3, B))
    coeffs[:, :, 0] = rgb_to_sh_dc(rgb)
    rot = np.zeros((n_points, 4))
    rot[:, 0] = 1.0
    return GaussianField(
        mu=pts, log_scale=np.log(nn)[:, None].repeat(3, axis=1), rot=rot,
        sh=coeffs.reshape(n_points, -1),
        opacity_logit=np.full(n_points, ad.logit_np(0.1)), sh_degree=sh_degree)


def densify_and_prune(fld: GaussianField, stats: DensifyStats, policy: DensifyPolicy,
                      rng: np.random.Generator, opt: Optional[ad.Adam] = None) -> dict:
    """One adaptive-density step; returns {"pruned", "cloned", "split"}.

    Low-opacity Gaussians are removed; among survivors, high-gradient ones
    are cloned (small, nudged along the mean positional gradient) or split
    (large, two children sampled from the parent). Optimizer moments follow
    the row mapping: survivors keep theirs, new rows start at zero.
    """
    n = fld.n
    if stats.n != n:
        raise ContractError("densify stats out of sync with field size")
    opacity = fld.opacities()
    keep = opacity >= policy.opacity_prune_threshold
    if not keep.any():
        keep[int(np.argmax(opacity))] = True  # never empty the field
    pruned = int(n - keep.sum())

    grad_mean = stats.mean_grad2d()[keep]
    grad3d = stats.mean_grad3d()[keep]
    arrays = {a: getattr(fld, a).data[keep] for a in ATTRS}
    survivors = int(keep.sum())
    scene_extent = 2 * SCENE_BOUND
    max_scale = np.exp(arrays["log_scale"]).max(axis=1)
    room = policy.max_gaussians - survivors
    cloned = split = 0
    src_rows = np.arange(survivors)

    if room > 0:
        hot = grad_mean > policy.grad_threshold
        small = max_scale <= policy.split_scale_threshold * scene_extent
        clone_idx = np.nonzero(hot & small)[0]
        split_idx = np.nonzero(hot & ~small)[0]
        budgeted = np.concatenate([clone_idx, split_idx])[:room]
        clone_idx = budgeted[np.isin(budgeted, clone_idx)]
        split_idx = budgeted[np.isin(budgeted, split_idx)]
        cloned, split = int(clone_idx.size), int(split_idx.size)

        new_blocks = {a: [arrays[a]] for a in ATTRS}
        new_rows = [src_rows]
        if cloned:
            g = grad3d[clone_idx]
            norm = np.linalg.norm(g, axis=1, keepdims=True)
            direction = np.where(norm > 1e-12, -g / np.maximum(norm, 1e-12), 0.0)
            step = 0.5 * np.exp(arrays["log_scale"][clone_idx]).mean(axis=1, keepdims=True)
            for a in ATTRS:
                block = arrays[a][clone_idx].copy()
                if a == "mu":
                    block += direction * step
                new_blocks[a].append(block)
            new_rows.append(np.full(cloned, -1))
        if split:
            # parent replaced in place by child 0; child 1 appended
            parent_mu = arrays["mu"][split_idx].copy()
            parent_ls = arrays["log_scale"][split_idx].copy()
            cov = _covariances(parent_ls, arrays["rot"][split_idx])
            chol = np.linalg.cholesky(cov + 1e-10 * np.eye(3))
            child_ls = parent_ls - np.log(1.6)
            for child in range(2):
                noise = rng.standard_normal((split, 3))
                pos = parent_mu + np.einsum("kij,kj->ki", chol, noise)
                if child == 0:
                    new_blocks["mu"][0][split_idx] = pos
                    new_blocks["log_scale"][0][split_idx] = child_ls
                else:
                    for a in ATTRS:
                        block = arrays[a][split_idx].copy()
                        if a == "mu":
                            block = pos
                        elif a == "log_scale":
                            block = child_ls
                        new_blocks[a].append(block)
                    new_rows.append(np.full(split, -1))
        src_rows = np.concatenate(new_rows)
        # split parents were replaced in place: treat as fresh rows
        src_rows[split_idx] = -1
        arrays = {a: np.concatenate(new_blocks[a]) for a in ATTRS}

    fld.replace_arrays(**arrays)
    if opt is not None:
        _remap_moments(opt, keep, src_rows)
    stats.__init__(fld.n)
    return {"pruned": pruned, "cloned": cloned, "split": split}


def _covariances(log_scale, rot):
    from .gaussians import build_covariance
    return build_covariance(log_scale, rot)


def _remap_moments(opt: ad.Adam, keep: np.ndarray, src_rows: np.ndarray):
    fresh = src_rows < 0
    for group in opt.groups:
        st = group["state"]
        for i, p in enumerate(group["params"]):
            for buf_name in ("m", "v"):
                buf = getattr(st, buf_name)[i]
                kept = buf[keep]
                out = np.zeros((src_rows.size,) + buf.shape[1:], dtype=buf.dtype)
                out[~fresh] = kept[src_rows[~fresh]]
                getattr(st, buf_name)[i] = out


def make_canonical_optimizer(fld: GaussianField, cfg: CanonicalConfig) -> ad.Adam:
    extent = 2 * SCENE_BOUND
    return ad.Adam([
        {"params": [fld.mu], "lr": cfg.lr_mu * extent, "name": "mu"},
        {"params": [fld.log_scale], "lr": cfg.lr_scale, "name": "scale"},
        {"params": [fld.rot], "lr": cfg.lr_rot, "name": "rot"},
        {"params": [fld.sh], "lr": cfg.lr_sh, "name": "sh"},
        {"params": [fld.opacity_logit], "lr": cfg.lr_opacity, "name": "opacity"},
    ])


def train_canonical(dataset: TrainingSet, cfg: CanonicalConfig,
                    fld: Optional[GaussianField] = None,
                    init_field_fn=None, init_tf: Optional[TransferFunction] = None):
    """Optimize the canonical field over randomly sampled training views."""
    if fld is None:
        if init_field_fn is None:
            raise ContractError("either an initial field or an init field_fn is required")
        fld = init_from_volume(init_field_fn, init_tf or TransferFunction.base(),
                               cfg.n_init, seed=cfg.seed, sh_degree=cfg.sh_degree)
    rng = np.random.default_rng(cfg.seed)
    opt = make_canonical_optimizer(fld, cfg)
    stats = DensifyStats(fld.n)
    pol = cfg.densify
    log = _CsvLog(cfg.log_path, ["iteration", "loss", "n_gaussians", "probe_psnr"])
    history = {"iteration": [], "loss": [], "n_gaussians": []}
    t0 = time.time()
    for it in range(cfg.iterations):
        opt.set_lr_scale(ad.exp_decay(it, cfg.iterations, cfg.lr_mu_final_factor), "mu")
        idx = int(rng.integers(len(dataset)))
        rec = dataset.records[idx]
        cam = dataset.camera(rec)
        with ad.Tape() as tape:
            tensors = {a: getattr(fld, a) for a in ATTRS}
            img_t, aux = render_tensor(tensors, fld.sh_degree, cam, bg=cfg.bg,
                                       n_threads=cfg.n_threads)
            loss = loss_color(img_t, dataset.images[idx], cfg.lambda_ssim)
        val = float(loss.data)
        if not np.isfinite(val):
            raise NumericError(f"canonical loss became non-finite at iteration {it}")
        opt.zero_grad()
        ad.backward(loss, tape)
        stats.accumulate(aux, aux["grad_mu"])
        opt.step()
        history["iteration"].append(it)
        history["loss"].append(val)
        history["n_gaussians"].append(fld.n)

        due = (it + 1) % pol.interval == 0
        in_window = pol.start_iteration <= it < pol.stop_fraction * cfg.iterations
        if due and in_window:
            densify_and_prune(fld, stats, pol, rng, opt)

        if cfg.log_every and it % cfg.log_every == 0:
            probe_psnr = _probe_psnr(fld, dataset, 0, cfg)
            log.row([it, val, fld.n, probe_psnr])
            _progress("canonical", it, cfg.iterations, val,
                      {"n": fld.n, "probe_psnr": round(probe_psnr, 2),
                       "elapsed_s": round(time.time() - t0, 1)})
    log.close()
    return fld, history


def _probe_psnr(fld, dataset, idx, cfg) -> float:
    from .rasterizer import render
    cam = dataset.camera(dataset.records[idx])
    fb = render(fld, cam, bg=cfg.bg, n_threads=cfg.n_threads)
    p = metrics.psnr(fb.rgb, dataset.images[idx])
    return 99.0 if np.isinf(p) else p
