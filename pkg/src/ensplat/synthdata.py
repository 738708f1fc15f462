"""Analytic ground-truth oracle: parameterized ensemble, reference
renderers, icosphere viewpoints, transfer functions, and dataset generation.

The ensemble is a sum of Gaussian blobs whose centers, amplitudes, and
widths are affine in the normalized simulation parameters, so ground truth
is computable at any parameter point, including ones never rendered into
the training set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ._colormap import COLOR_TABLE
from .errors import ConfigError, ContractError, NumericError
from .gaussians import Camera
from .pngio import load_png, save_png

SCENE_BOUND = 1.0  # ensemble lives in [-1, 1]^3

_COLORS = np.asarray(COLOR_TABLE, dtype=np.float64)


def colormap(values: np.ndarray) -> np.ndarray:
    """Linear interpolation into the fixed 256-entry color table."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0
    lo = np.floor(v).astype(np.int64)
    hi = np.minimum(lo + 1, 255)
    w = (v - lo)[..., None]
    return _COLORS[lo] * (1 - w) + _COLORS[hi] * w


@dataclass
class TransferFunction:
    """Piecewise-linear opacity over four control points.

    Endpoints are pinned at (0,0) and (1,1); the two interior points c1,
    c2 are movable and must stay ordered by scalar value. Color always
    comes from the fixed table, so edits act on opacity only.
    """

    c1: tuple = (1.0 / 3.0, 0.10)
    c2: tuple = (2.0 / 3.0, 0.70)

    # scalar/opacity displacement bounds for the editable points
    DS_MAX = 0.15
    DO_MAX = 0.30

    def __post_init__(self):
        if not (0.0 < self.c1[0] < self.c2[0] < 1.0):
            raise ConfigError(f"TF control points out of order: {self.c1}, {self.c2}")
        if not all(0.0 <= c[1] <= 1.0 for c in (self.c1, self.c2)):
            raise ConfigError("TF opacities must lie in [0,1]")

    @property
    def control_points(self):
        return [(0.0, 0.0), tuple(self.c1), tuple(self.c2), (1.0, 1.0)]

    def opacity(self, s: np.ndarray) -> np.ndarray:
        pts = self.control_points
        xs = np.array([p[0] for p in pts])
        ys = np.array([p[1] for p in pts])
        return np.interp(np.clip(s, 0.0, 1.0), xs, ys)

    def sampled(self, n: int = 256) -> np.ndarray:
        return self.opacity(np.linspace(0.0, 1.0, n))

    @classmethod
    def base(cls) -> "TransferFunction":
        return cls()

    def displacement(self, base: Optional["TransferFunction"] = None) -> np.ndarray:
        """Signed (ds1, do1, ds2, do2) relative to the base TF."""
        base = base or TransferFunction.base()
        return np.array([
            self.c1[0] - base.c1[0], self.c1[1] - base.c1[1],
            self.c2[0] - base.c2[0], self.c2[1] - base.c2[1],
        ])

    @classmethod
    def from_displacement(cls, d, base: Optional["TransferFunction"] = None) -> "TransferFunction":
        base = base or cls.base()
        d = np.asarray(d, dtype=np.float64)
        if d.shape != (4,):
            raise ConfigError(f"TF displacement must be a 4-vector, got shape {d.shape}")
        return cls(c1=(base.c1[0] + d[0], float(np.clip(base.c1[1] + d[1], 0, 1))),
                   c2=(base.c2[0] + d[2], float(np.clip(base.c2[1] + d[3], 0, 1))))

    @staticmethod
    def displacement_bounds():
        m, o = TransferFunction.DS_MAX, TransferFunction.DO_MAX
        return [(-m, m), (-o, o), (-m, m), (-o, o)]


class SyntheticEnsemble:
    """Sum-of-blobs scalar field, affine in normalized parameters."""

    def __init__(self, sim_dim: int = 2, n_blobs: int = 4, seed: int = 0,
                 center_sens: float = 0.35, amp_sens: float = 0.5, sigma_sens: float = 0.3):
        if sim_dim < 1 or n_blobs < 1:
            raise ConfigError("sim_dim and n_blobs must be >= 1")
        self.sim_dim = sim_dim
        self.n_blobs = n_blobs
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.centers0 = rng.uniform(-0.45, 0.45, (n_blobs, 3))
        self.sigmas0 = rng.uniform(0.16, 0.30, n_blobs)
        self.amps0 = rng.uniform(0.7, 1.0, n_blobs)
        # affine sensitivities, zero at the parameter-space midpoint
        self.center_sens = rng.uniform(-1, 1, (n_blobs, 3, sim_dim)) * center_sens
        self.amp_sens = rng.uniform(-1, 1, (n_blobs, sim_dim)) * amp_sens
        self.sigma_sens = rng.uniform(-1, 1, (n_blobs, sim_dim)) * sigma_sens

    def _blob_params(self, p_sim):
        p = np.asarray(p_sim, dtype=np.float64)
        if p.shape != (self.sim_dim,):
            raise ConfigError(f"expected {self.sim_dim}-d simulation parameters, got {p.shape}")
        d = p - 0.5
        centers = self.centers0 + self.center_sens @ d
        amps = np.clip(self.amps0 * (1 + self.amp_sens @ d), 0.05, 2.0)
        sigmas = np.clip(self.sigmas0 * (1 + self.sigma_sens @ d), 0.04, 0.8)
        return centers, amps, sigmas

    def field(self, x: np.ndarray, p_sim) -> np.ndarray:
        """Scalar field in [0,1] at points x (..., 3)."""
        centers, amps, sigmas = self._blob_params(p_sim)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        acc = np.zeros(pts.shape[0])
        for c, a, s in zip(centers, amps, sigmas):
            d2 = ((pts - c) ** 2).sum(axis=1)
            acc += a * np.exp(-d2 / (2 * s * s))
        out = np.clip(acc, 0.0, 1.0)
        return out[0] if single else out

    def field_grad(self, x: np.ndarray, p_sim) -> np.ndarray:
        """Analytic spatial gradient of the (unclamped) blob sum."""
        centers, amps, sigmas = self._blob_params(p_sim)
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.zeros_like(pts)
        for c, a, s in zip(centers, amps, sigmas):
            diff = pts - c
            d2 = (diff ** 2).sum(axis=1)
            g += (-a / (s * s)) * np.exp(-d2 / (2 * s * s))[:, None] * diff
        return g[0] if np.asarray(x).ndim == 1 else g

    def field_fn(self, p_sim) -> Callable[[np.ndarray], np.ndarray]:
        p = np.array(p_sim, dtype=np.float64)
        return lambda x: self.field(x, p)

    def amp_bound(self, p_sim) -> float:
        _, amps, _ = self._blob_params(p_sim)
        return float(min(amps.sum(), 1.0))

    def spec(self) -> dict:
        # enough to reconstruct the oracle exactly
        return {"sim_dim": self.sim_dim, "n_blobs": self.n_blobs, "seed": self.seed}


# ---------------------------------------------------------------------------
# viewpoints


def icosphere_vertices(frequency: int) -> np.ndarray:
    """Unit geodesic icosphere vertices: 10 f^2 + 2 of them, deterministic order."""
    if frequency < 1:
        raise ContractError("icosphere frequency must be >= 1")
    phi = (1 + np.sqrt(5)) / 2
    base = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    base /= np.linalg.norm(base[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    f = frequency
    seen = {}
    verts = []

    def add(p):
        key = tuple(np.round(p * 1e6).astype(np.int64))
        if key not in seen:
            seen[key] = len(verts)
            verts.append(p)
        return seen[key]

    for (i, j, k) in faces:
        a, b, c = base[i], base[j], base[k]
        for u in range(f + 1):
            for v in range(f + 1 - u):
                w = f - u - v
                p = (u * a + v * b + w * c) / f
                add(p / np.linalg.norm(p))
    out = np.array(verts)
    if out.shape[0] != 10 * f * f + 2:
        raise NumericError(f"icosphere dedup failed: {out.shape[0]} vertices")
    # deterministic global order, independent of face traversal
    order = np.lexsort((np.round(out[:, 0], 9), np.round(out[:, 1], 9),
                        np.round(out[:, 2], 9)))
    return out[order]


def icosphere_cameras(frequency: int, radius: float, look_at=(0.0, 0.0, 0.0),
                      width: int = 64, height: int = 64, focal: float = 80.0,
                      near: float = 0.05, far: float = 100.0) -> list:
    """Cameras at geodesic vertices, alternately tagged train/test."""
    verts = icosphere_vertices(frequency)
    target = np.asarray(look_at, dtype=np.float64)
    cams = []
    for i, v in enumerate(verts):
        cam = Camera.look_at(target + radius * v, target, width, height, focal,
                             near=near, far=far)
        cams.append({"id": i, "camera": cam, "split": "train" if i % 2 == 0 else "test",
                     "unit": v})
    return cams


# ---------------------------------------------------------------------------
# reference renderers


DENSITY_SCALE = 8.0


def raymarch_volume(field_fn, tf: TransferFunction, cam: Camera,
                    step_size: Optional[float] = None, density_scale: float = DENSITY_SCALE,
                    bg=(1.0, 1.0, 1.0), return_transmittance: bool = False):
    """Front-to-back emission-absorption marching of an analytic field.

    Per step: sigma = tf.opacity(field) * density_scale, the slab opacity is
    1 - exp(-sigma * dt), and color comes from the fixed table.
    """
    if step_size is None:
        step_size = 2 * SCENE_BOUND / 256.0
    if step_size <= 0:
        raise ContractError("step_size must be positive")
    H, W = cam.height, cam.width
    origins, dirs = _pixel_rays(cam)
    t0, t1 = _box_span(origins, dirs)
    n_steps = int(np.ceil((t1 - t0).max() / step_size)) if np.any(t1 > t0) else 0
    rgb = np.zeros((H * W, 3))
    T = np.ones(H * W)
    for k in range(n_steps):
        tmid = t0 + (k + 0.5) * step_size
        active = (tmid < t1) & (T > 1e-5)
        if not active.any():
            break
        pts = origins[active] + dirs[active] * tmid[active, None]
        vals = field_fn(pts)
        sigma = tf.opacity(vals) * density_scale
        a = 1.0 - np.exp(-sigma * step_size)
        col = colormap(vals)
        rgb[active] += (T[active] * a)[:, None] * col
        T[active] *= 1.0 - a
    rgb += T[:, None] * np.asarray(bg, dtype=np.float64)
    img = rgb.reshape(H, W, 3)
    if return_transmittance:
        return img, T.reshape(H, W)
    return img


def raymarch_isosurface(field_fn, grad_fn, isovalue: float, cam: Camera,
                        step_size: Optional[float] = None, bg=(1.0, 1.0, 1.0),
                        refinements: int = 10, return_normals: bool = False):
    """First ray/isosurface crossing by sign change + bisection, Lambert shaded."""
    if not (0.0 < isovalue < 1.0):
        raise ContractError("isovalue must lie in (0, 1)")
    if step_size is None:
        step_size = 2 * SCENE_BOUND / 256.0
    H, W = cam.height, cam.width
    origins, dirs = _pixel_rays(cam)
    t0, t1 = _box_span(origins, dirs)
    n_rays = H * W
    hit_t = np.full(n_rays, np.nan)
    prev_t = t0.copy()
    prev_v = field_fn(origins + dirs * prev_t[:, None]) - isovalue
    searching = t0 < t1
    n_steps = int(np.ceil((t1 - t0).max() / step_size)) if searching.any() else 0
    for k in range(1, n_steps + 1):
        t = np.minimum(t0 + k * step_size, t1)
        active = searching & (prev_t < t1)
        if not active.any():
            break
        v = np.empty_like(prev_v)
        pts = origins[active] + dirs[active] * t[active, None]
        v[active] = field_fn(pts) - isovalue
        crossed = active & (np.sign(v) != np.sign(prev_v)) & (prev_v != 0)
        if crossed.any():
            lo = prev_t[crossed].copy()
            hi = t[crossed].copy()
            flo = prev_v[crossed].copy()
            o_c, d_c = origins[crossed], dirs[crossed]
            for _ in range(refinements):
                mid = 0.5 * (lo + hi)
                fm = field_fn(o_c + d_c * mid[:, None]) - isovalue
                left = np.sign(fm) == np.sign(flo)
                lo = np.where(left, mid, lo)
                flo = np.where(left, fm, flo)
                hi = np.where(left, hi, mid)
            hit_t[crossed] = 0.5 * (lo + hi)
            searching &= ~crossed
        prev_t, prev_v = t, np.where(active, v, prev_v)
    img = np.ones((n_rays, 3)) * np.asarray(bg, dtype=np.float64)
    normal_buf = np.zeros((n_rays, 3))
    hit = np.isfinite(hit_t)
    if hit.any():
        pts = origins[hit] + dirs[hit] * hit_t[hit, None]
        normals = grad_fn(pts)
        nn = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = -normals / np.maximum(nn, 1e-12)
        lambert = np.abs((normals * -dirs[hit]).sum(axis=1))
        base_color = colormap(np.full(hit.sum(), isovalue))
        img[hit] = base_color * (0.15 + 0.85 * lambert[:, None])
        normal_buf[hit] = normals
    if return_normals:
        return img.reshape(H, W, 3), normal_buf.reshape(H, W, 3)
    return img.reshape(H, W, 3)


def _pixel_rays(cam: Camera):
    H, W = cam.height, cam.width
    xs, ys = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    dx = (xs - cam.cx) / cam.focal
    dy = (ys - cam.cy) / cam.focal
    dirs_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1).reshape(-1, 3)
    R = cam.view[:3, :3]
    dirs = dirs_cam @ R  # R^T applied row-wise
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.position, dirs.shape).copy()
    return origins, dirs


def _box_span(origins, dirs, bound: float = SCENE_BOUND):
    """Entry/exit distances of rays through the scene cube."""
    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    t_lo = (-bound - origins) * inv
    t_hi = (bound - origins) * inv
    t_near = np.minimum(t_lo, t_hi).max(axis=1)
    t_far = np.maximum(t_lo, t_hi).min(axis=1)
    t_near = np.maximum(t_near, 0.0)
    return t_near, np.maximum(t_far, t_near)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class DatasetSpec:
    """Everything gen-data needs; serialized into the manifest."""

    ensemble: SyntheticEnsemble
    sim_points_train: np.ndarray           # (M, d) normalized
    sim_points_test: np.ndarray
    cameras: list
    width: int = 64
    height: int = 64
    task: Optional[str] = None              # None | "tf" | "isovalue"
    vis_train: Sequence = ()                # TF displacement vectors or isovalues
    vis_test: Sequence = ()
    tf_member_subsample: float = 1.0        # fraction of members rendered per TF
    sim_bounds: Optional[list] = None       # raw per-dimension bounds
    sim_names: Optional[list] = None
    seed: int = 0
    step_size: Optional[float] = None


def generate_dataset(spec: DatasetSpec, out_dir) -> dict:
    """Render every requested combination to PNG and write manifest.json."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ens = spec.ensemble
    base_tf = TransferFunction.base()
    records = []
    rng = np.random.default_rng(spec.seed)

    members = [(i, p, "train") for i, p in enumerate(np.atleast_2d(spec.sim_points_train))]
    off = len(members)
    members += [(off + i, p, "test") for i, p in enumerate(np.atleast_2d(spec.sim_points_test))]

    vis_entries = [(None, None, "train")]
    if spec.task == "tf":
        vis_entries = ([(i, np.asarray(d), "train") for i, d in enumerate(spec.vis_train)]
                       + [(len(spec.vis_train) + i, np.asarray(d), "test")
                          for i, d in enumerate(spec.vis_test)])
    elif spec.task == "isovalue":
        vis_entries = ([(i, float(v), "train") for i, v in enumerate(spec.vis_train)]
                       + [(len(spec.vis_train) + i, float(v), "test")
                          for i, v in enumerate(spec.vis_test)])

    for vis_id, vis_val, vis_split in vis_entries:
        member_pool = members
        if spec.task == "tf" and spec.tf_member_subsample < 1.0:
            train_members = [m for m in members if m[2] == "train"]
            n_keep = max(1, int(round(len(train_members) * spec.tf_member_subsample)))
            keep_ids = set(rng.choice([m[0] for m in train_members], size=n_keep,
                                      replace=False).tolist())
            member_pool = [m for m in members if m[0] in keep_ids or m[2] == "test"]
        for member_id, p_sim, member_split in member_pool:
            field_fn = ens.field_fn(p_sim)
            for cam_rec in spec.cameras:
                cam = cam_rec["camera"]
                if spec.task == "isovalue" and vis_val is not None:
                    img = raymarch_isosurface(field_fn, lambda x: ens.field_grad(x, p_sim),
                                              vis_val, cam, step_size=spec.step_size)
                else:
                    tf = (TransferFunction.from_displacement(vis_val) if spec.task == "tf"
                          else base_tf)
                    img = raymarch_volume(field_fn, tf, cam, step_size=spec.step_size)
                vis_tag = "xxx" if vis_id is None else f"{vis_id:03d}"
                name = f"m{member_id:03d}_v{vis_tag}_c{cam_rec['id']:03d}.png"
                save_png(out / "images" / name, img)
                records.append({
                    "member": member_id,
                    "p_sim": [float(x) for x in np.atleast_1d(p_sim)],
                    "member_split": member_split,
                    "camera": cam_rec["id"],
                    "view_split": cam_rec["split"],
                    "task": spec.task,
                    "vis_id": vis_id,
                    "p_vis": (None if vis_val is None
                              else [float(x) for x in np.atleast_1d(vis_val)]),
                    "vis_split": vis_split,
                    "image": f"images/{name}",
                })

    manifest = {
        "schema_version": 1,
        "image": {"width": spec.width, "height": spec.height},
        "ensemble": ens.spec(),
        "task": spec.task,
        "parameters": {
            "simulation": {
                "names": spec.sim_names or [f"p{i}" for i in range(ens.sim_dim)],
                "bounds": spec.sim_bounds or [[0.0, 1.0]] * ens.sim_dim,
            },
            "visualization": _vis_block(spec),
        },
        "cameras": [_camera_record(c) for c in spec.cameras],
        "records": records,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def _vis_block(spec: DatasetSpec):
    base = TransferFunction.base()
    if spec.task == "tf":
        return {"task": "tf", "dim": 4,
                "bounds": [list(b) for b in TransferFunction.displacement_bounds()],
                "base_tf": {"control_points": base.control_points}}
    if spec.task == "isovalue":
        vals = [float(v) for v in list(spec.vis_train) + list(spec.vis_test)]
        return {"task": "isovalue", "dim": 1,
                "bounds": [[min(vals), max(vals)]] if vals else [[0.0, 1.0]]}
    return {"task": None, "dim": 0, "bounds": [],
            "base_tf": {"control_points": base.control_points}}


def _camera_record(cam_rec):
    cam = cam_rec["camera"]
    v = cam_rec["unit"]
    azim = float(np.degrees(np.arctan2(v[1], v[0])))
    elev = float(np.degrees(np.arcsin(np.clip(v[2], -1, 1))))
    radius = float(np.linalg.norm(cam.position))
    return {"id": cam_rec["id"], "split": cam_rec["split"],
            "azimuth": azim, "elevation": elev, "radius": radius,
            "view": cam.view.tolist(), "focal": cam.focal,
            "width": cam.width, "height": cam.height,
            "near": cam.near, "far": cam.far}


def load_manifest(path) -> dict:
    path = Path(path)
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != 1:
        raise ConfigError("unsupported manifest schema version")
    root = path.parent
    w, h = manifest["image"]["width"], manifest["image"]["height"]
    for rec in manifest["records"]:
        img_path = root / rec["image"]
        if not img_path.exists():
            raise ConfigError(f"manifest references missing image {rec['image']}")
    manifest["_root"] = str(root)
    return manifest


def manifest_camera(manifest: dict, cam_id: int) -> Camera:
    rec = next(c for c in manifest["cameras"] if c["id"] == cam_id)
    return Camera(np.asarray(rec["view"]), rec["focal"], rec["width"], rec["height"],
                  rec["near"], rec["far"])


def load_record_image(manifest: dict, rec: dict) -> np.ndarray:
    return load_png(Path(manifest["_root"]) / rec["image"])
