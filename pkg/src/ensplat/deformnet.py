"""Parameter-conditioned deformation networks.

Two sequential stages deform a canonical Gaussian field. The first adapts
it to a simulation-parameter point: a positional-encoded spatial MLP embeds
each Gaussian center, a parameter encoder embeds the condition, a small
adapter MLP turns the condition embedding into a residual added onto the
spatial feature, and a shared decoder backbone feeds per-attribute offset
heads. The second stage ("vis") reuses the first stage's condition
embedding, encodes the already-deformed positions plus a visualization
parameter, fuses both through sequential adapter residuals, and decodes
with lightweight heads only (no backbone); geometry heads may be disabled
entirely for appearance-only tasks.

Offsets apply in pre-activation space (log-scale, opacity logit), so any
finite offset keeps scales positive and opacities inside (0,1). Head
output layers are zero-initialized: an untrained network is exactly the
identity deformation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

ALL_HEADS = ("mu", "scale", "rot", "sh", "opacity")
APPEARANCE_HEADS = ("sh", "opacity")

PARAM_KIND_DIMS = {"isovalue": 1, "tf_displacement": 4}


@dataclass
class ParamVector:
    """A normalized parameter point: each component in [0,1]."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        expected = PARAM_KIND_DIMS.get(self.kind)
        if expected is not None and self.values.size != expected:
            raise ConfigError(f"{self.kind} parameters must have {expected} "
                              f"components, got {self.values.size}")
        if self.values.size == 0:
            raise ConfigError("empty parameter vector")

    @classmethod
    def from_raw(cls, raw, bounds, kind: str) -> "ParamVector":
        """Normalize raw values by declared bounds, clamping with a warning."""
        raw = np.asarray(raw, dtype=np.float64).reshape(-1)
        bounds = np.asarray(bounds, dtype=np.float64)
        if bounds.shape != (raw.size, 2):
            raise ConfigError(f"bounds shape {bounds.shape} does not match "
                              f"{raw.size} parameter components")
        span = bounds[:, 1] - bounds[:, 0]
        norm = (raw - bounds[:, 0]) / np.where(span == 0, 1.0, span)
        clamped = np.clip(norm, 0.0, 1.0)
        if not np.allclose(norm, clamped):
            warnings.warn(f"{kind} parameters outside declared bounds were clamped",
                          stacklevel=2)
        return cls(clamped, kind)

    @property
    def dim(self) -> int:
        return self.values.size

    def was_clamped_from(self, raw, bounds) -> bool:
        raw = np.asarray(raw, dtype=np.float64).reshape(-1)
        bounds = np.asarray(bounds, dtype=np.float64)
        return bool(np.any(raw < bounds[:, 0]) or np.any(raw > bounds[:, 1]))


@dataclass
class DeformNetConfig:
    feat_dim: int = 128
    hidden_dim: int = 512
    pe_freqs_spatial: int = 10
    pe_freqs_param: int = 6
    enabled_heads: tuple = ALL_HEADS
    has_backbone: bool = True
    sh_dim: int = 12
    head_hidden: Optional[int] = None
    # hidden width of the parameter encoder and adapter MLPs; small values
    # force smooth dependence on the condition (few training conditions)
    cond_hidden: Optional[int] = None

    def __post_init__(self):
        self.enabled_heads = tuple(self.enabled_heads)
        if not self.enabled_heads:
            raise ConfigError("at least one decoder head must be enabled")
        bad = set(self.enabled_heads) - set(ALL_HEADS)
        if bad:
            raise ConfigError(f"unknown heads {sorted(bad)}")
        if self.head_hidden is None:
            self.head_hidden = self.feat_dim
        if self.cond_hidden is None:
            self.cond_hidden = self.feat_dim

    def head_out_dim(self, name: str) -> int:
        return {"mu": 3, "scale": 3, "rot": 4, "sh": self.sh_dim, "opacity": 1}[name]


def positional_encode(x: ad.Tensor, freqs: int) -> ad.Tensor:
    """[sin(2^l pi x), cos(2^l pi x)] per frequency, concatenated columnwise."""
    parts = []
    for l in range(freqs):
        scaled = ad.scale(x, float(2 ** l) * np.pi)
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    return ad.concat_cols(parts)


def pe_dim(k: int, freqs: int) -> int:
    return 2 * freqs * k


class Mlp2:
    """Two linear layers with an inner ReLU; optionally ReLU after, or a
    zero-initialized output layer (identity-at-init heads)."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int, name: str,
                 final_relu: bool = False, zero_out: bool = False):
        def he(n_in, n_out):
            return rng.normal(0, np.sqrt(2.0 / n_in), (n_in, n_out))

        self.name = name
        self.final_relu = final_relu
        self.w1 = ad.parameter(he(d_in, d_hidden), name=f"{name}.w1")
        self.b1 = ad.parameter(np.zeros(d_hidden), name=f"{name}.b1")
        if zero_out:
            w2 = np.zeros((d_hidden, d_out))
        else:
            w2 = rng.normal(0, np.sqrt(1.0 / d_hidden), (d_hidden, d_out))
        self.w2 = ad.parameter(w2, name=f"{name}.w2")
        self.b2 = ad.parameter(np.zeros(d_out), name=f"{name}.b2")

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        h = ad.relu(ad.add_row(ad.matmul(x, self.w1), self.b1))
        out = ad.add_row(ad.matmul(h, self.w2), self.b2)
        return ad.relu(out) if self.final_relu else out

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def state(self) -> Dict[str, np.ndarray]:
        return {f"{self.name}.{k}": getattr(self, k).data
                for k in ("w1", "b1", "w2", "b2")}

    def load_state(self, blocks: Dict[str, np.ndarray]):
        for k in ("w1", "b1", "w2", "b2"):
            key = f"{self.name}.{k}"
            t = getattr(self, k)
            arr = np.asarray(blocks[key], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{key}: shape {arr.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(arr)


class SimDeformer:
    """First-stage deformation: canonical Gaussians -> simulation condition."""

    KIND = "simulation"

    def __init__(self, cfg: DeformNetConfig, param_dim: int,
                 scene_center=(0.0, 0.0, 0.0), scene_half_extent: float = 1.0,
                 seed: int = 0):
        if param_dim < 1:
            raise ConfigError("simulation parameter dimension must be >= 1")
        self.cfg = cfg
        self.param_dim = param_dim
        self.scene_center = np.asarray(scene_center, dtype=np.float64)
        self.scene_half_extent = float(scene_half_extent)
        rng = np.random.default_rng(seed)
        f = cfg.feat_dim
        self.spatial = Mlp2(rng, pe_dim(3, cfg.pe_freqs_spatial), f, f, "spatial")
        self.param_enc = Mlp2(rng, pe_dim(param_dim, cfg.pe_freqs_param),
                              cfg.cond_hidden, f, "param")
        self.adapter = Mlp2(rng, f, cfg.cond_hidden, f, "adapter")
        if cfg.has_backbone:
            self.backbone = Mlp2(rng, f, cfg.hidden_dim, cfg.hidden_dim, "backbone",
                                 final_relu=True)
            head_in = cfg.hidden_dim
        else:
            self.backbone = None
            head_in = f
        self.heads = {name: Mlp2(rng, head_in, cfg.head_hidden, cfg.head_out_dim(name),
                                 f"head_{name}", zero_out=True)
                      for name in cfg.enabled_heads}

    # -- pieces ---------------------------------------------------------

    def normalize_mu(self, mu_t: ad.Tensor) -> ad.Tensor:
        shift = ad.Tensor(-self.scene_center, dtype=mu_t.data.dtype)
        return ad.scale(ad.add_row(mu_t, shift), 1.0 / self.scene_half_extent)

    def encode_spatial(self, mu_t: ad.Tensor) -> ad.Tensor:
        return self.spatial(positional_encode(self.normalize_mu(mu_t),
                                              self.cfg.pe_freqs_spatial))

    def encode_params(self, p: ParamVector) -> ad.Tensor:
        if p.kind != self.KIND:
            raise ConfigError(f"expected {self.KIND} parameters, got {p.kind}")
        if p.dim != self.param_dim:
            raise ConfigError(f"expected {self.param_dim}-d parameters, got {p.dim}")
        row = ad.Tensor(p.values.reshape(1, -1))
        return self.param_enc(positional_encode(row, self.cfg.pe_freqs_param))

    def fuse(self, z_x: ad.Tensor, z_p: ad.Tensor, adapter: Mlp2) -> ad.Tensor:
        dz = adapter(z_p)
        return ad.add_row(z_x, _row(dz))

    def decode(self, z: ad.Tensor) -> Dict[str, ad.Tensor]:
        if self.backbone is not None:
            z = self.backbone(z)
        return {name: head(z) for name, head in self.heads.items()}

    # -- full forward ----------------------------------------------------

    def offsets(self, mu_t: ad.Tensor, z_p: ad.Tensor) -> Dict[str, ad.Tensor]:
        z_x = self.encode_spatial(mu_t)
        return self.decode(self.fuse(z_x, z_p, self.adapter))

    def deform(self, fld, p: ParamVector):
        """Apply first-stage offsets; returns (deformed tensors, offsets, z_p)."""
        z_p = self.encode_params(p)
        offs = self.offsets(fld.mu, z_p)
        deformed = apply_offsets(fld, offs)
        return deformed, offs, z_p

    def parameters(self):
        ps = (self.spatial.parameters() + self.param_enc.parameters()
              + self.adapter.parameters())
        if self.backbone is not None:
            ps += self.backbone.parameters()
        for name in self.cfg.enabled_heads:
            ps += self.heads[name].parameters()
        return ps

    def state(self) -> Dict[str, np.ndarray]:
        blocks = {}
        blocks.update(self.spatial.state())
        blocks.update(self.param_enc.state())
        blocks.update(self.adapter.state())
        if self.backbone is not None:
            blocks.update(self.backbone.state())
        for h in self.heads.values():
            blocks.update(h.state())
        return blocks

    def load_state(self, blocks):
        self.spatial.load_state(blocks)
        self.param_enc.load_state(blocks)
        self.adapter.load_state(blocks)
        if self.backbone is not None:
            self.backbone.load_state(blocks)
        for h in self.heads.values():
            h.load_state(blocks)

    def meta(self) -> dict:
        return {"kind": self.KIND, "param_dim": self.param_dim,
                "scene_center": self.scene_center.tolist(),
                "scene_half_extent": self.scene_half_extent,
                "config": _cfg_meta(self.cfg)}


class VisDeformer:
    """Second-stage deformation conditioned on a visualization parameter.

    Operates on the already-deformed positions; the first stage's condition
    embedding is fused first, then the visualization embedding, each through
    its own adapter residual. No decoder backbone.
    """

    def __init__(self, cfg: DeformNetConfig, vis_kind: str,
                 scene_center=(0.0, 0.0, 0.0), scene_half_extent: float = 1.0,
                 seed: int = 1):
        if vis_kind not in PARAM_KIND_DIMS:
            raise ConfigError(f"unknown visualization parameter kind '{vis_kind}'")
        if cfg.has_backbone:
            raise ConfigError("second-stage deformer carries no decoder backbone")
        self.cfg = cfg
        self.vis_kind = vis_kind
        self.param_dim = PARAM_KIND_DIMS[vis_kind]
        self.scene_center = np.asarray(scene_center, dtype=np.float64)
        self.scene_half_extent = float(scene_half_extent)
        rng = np.random.default_rng(seed)
        f = cfg.feat_dim
        self.spatial = Mlp2(rng, pe_dim(3, cfg.pe_freqs_spatial), f, f, "vspatial")
        self.vis_enc = Mlp2(rng, pe_dim(self.param_dim, cfg.pe_freqs_param),
                            cfg.cond_hidden, f, "vparam")
        self.adapter_sim = Mlp2(rng, f, cfg.cond_hidden, f, "vadapter_sim")
        self.adapter_vis = Mlp2(rng, f, cfg.cond_hidden, f, "vadapter_vis")
        self.heads = {name: Mlp2(rng, f, cfg.head_hidden, cfg.head_out_dim(name),
                                 f"vhead_{name}", zero_out=True)
                      for name in cfg.enabled_heads}

    def normalize_mu(self, mu_t: ad.Tensor) -> ad.Tensor:
        shift = ad.Tensor(-self.scene_center, dtype=mu_t.data.dtype)
        return ad.scale(ad.add_row(mu_t, shift), 1.0 / self.scene_half_extent)

    def encode_params(self, p: ParamVector) -> ad.Tensor:
        if p.kind != self.vis_kind:
            raise ConfigError(f"expected {self.vis_kind} parameters, got {p.kind}")
        row = ad.Tensor(p.values.reshape(1, -1))
        return self.vis_enc(positional_encode(row, self.cfg.pe_freqs_param))

    def offsets(self, mu_prime_t: ad.Tensor, z_p_sim: ad.Tensor,
                p_vis: ParamVector) -> Dict[str, ad.Tensor]:
        z_x = self.spatial(positional_encode(self.normalize_mu(mu_prime_t),
                                             self.cfg.pe_freqs_spatial))
        z = ad.add_row(z_x, _row(self.adapter_sim(z_p_sim)))
        z = ad.add_row(z, _row(self.adapter_vis(self.encode_params(p_vis))))
        return {name: head(z) for name, head in self.heads.items()}

    def deform(self, deformed_stage1: Dict[str, ad.Tensor], z_p_sim: ad.Tensor,
               p_vis: ParamVector):
        offs = self.offsets(deformed_stage1["mu"], z_p_sim, p_vis)
        out = dict(deformed_stage1)
        for attr, key in ATTR_TO_HEAD.items():
            if key in offs:
                out[attr] = ad.add(deformed_stage1[attr], offs[key])
        return out, offs

    def parameters(self):
        ps = (self.spatial.parameters() + self.vis_enc.parameters()
              + self.adapter_sim.parameters() + self.adapter_vis.parameters())
        for name in self.cfg.enabled_heads:
            ps += self.heads[name].parameters()
        return ps

    def state(self):
        blocks = {}
        for m in (self.spatial, self.vis_enc, self.adapter_sim, self.adapter_vis,
                  *self.heads.values()):
            blocks.update(m.state())
        return blocks

    def load_state(self, blocks):
        for m in (self.spatial, self.vis_enc, self.adapter_sim, self.adapter_vis,
                  *self.heads.values()):
            m.load_state(blocks)

    def meta(self) -> dict:
        return {"kind": self.vis_kind, "param_dim": self.param_dim,
                "scene_center": self.scene_center.tolist(),
                "scene_half_extent": self.scene_half_extent,
                "config": _cfg_meta(self.cfg)}


ATTR_TO_HEAD = {"mu": "mu", "log_scale": "scale", "rot": "rot", "sh": "sh",
                "opacity_logit": "opacity"}


def apply_offsets(fld, offs: Dict[str, ad.Tensor]) -> Dict[str, ad.Tensor]:
    """canonical + offsets in pre-activation space (tape-tracked adds)."""
    out = {}
    for attr, key in ATTR_TO_HEAD.items():
        base = getattr(fld, attr)
        out[attr] = ad.add(base, offs[key]) if key in offs else base
    return out


def offsets_zero_like(fld, cfg: DeformNetConfig) -> Dict[str, np.ndarray]:
    n = fld.n
    return {name: np.zeros((n, cfg.head_out_dim(name)), dtype=fld.mu.data.dtype)
            for name in ALL_HEADS}


def _row(t: ad.Tensor) -> ad.Tensor:
    """(1,n) -> (n,) view for row-broadcast addition."""
    return ad.custom_op("row_view", t.data.reshape(-1), (t,),
                        lambda g: (g.reshape(1, -1),))


def _cfg_meta(cfg: DeformNetConfig) -> dict:
    return {"feat_dim": cfg.feat_dim, "hidden_dim": cfg.hidden_dim,
            "pe_freqs_spatial": cfg.pe_freqs_spatial,
            "pe_freqs_param": cfg.pe_freqs_param,
            "enabled_heads": list(cfg.enabled_heads),
            "has_backbone": cfg.has_backbone, "sh_dim": cfg.sh_dim,
            "head_hidden": cfg.head_hidden, "cond_hidden": cfg.cond_hidden}


def config_from_meta(meta: dict) -> DeformNetConfig:
    m = dict(meta)
    m["enabled_heads"] = tuple(m["enabled_heads"])
    return DeformNetConfig(**m)
