"""Trained-model container: canonical field, deformation network weights,
parameter bounds and task descriptors, packed in one zip file.

Layout (all entries stored uncompressed with fixed timestamps, so packing
the same inputs yields byte-identical bundles):

    meta.json                      format version, bounds, tasks, net configs
    canonical.gsur                 Gaussian field binary container
    weights/sim/<block>.npy        first-stage network tensors
    weights/vis_<task>/<block>.npy second-stage tensors, one set per task
"""

from __future__ import annotations

import io
import json
import threading
import zipfile
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .deformnet import (ParamVector, SimDeformer, VisDeformer, config_from_meta)
from .errors import ConfigError, ContractError
from .gaussians import Camera, GaussianField
from .rasterizer import render_arrays
from .synthdata import SCENE_BOUND

FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr))
    return buf.getvalue()


class ModelBundle:
    """A loaded model: canonical field + F_sim + optional per-task F_vis."""

    def __init__(self, canonical: GaussianField, fsim: SimDeformer,
                 fvis: Optional[Dict[str, VisDeformer]] = None, meta: Optional[dict] = None):
        self.canonical = canonical
        self.fsim = fsim
        self.fvis = dict(fvis or {})
        self.meta = meta or {}
        self._deform_cache: OrderedDict = OrderedDict()
        self._cache_lock = threading.Lock()
        self._validate()

    def _validate(self):
        tasks = self.meta.get("tasks", {})
        for task in self.fvis:
            if task not in tasks:
                raise ContractError(f"bundle carries weights for undeclared task '{task}'")
        bounds = self.meta.get("simulation", {}).get("bounds", [])
        if self.fsim is not None and len(bounds) != self.fsim.param_dim:
            raise ContractError("simulation bounds dimensionality does not match the "
                                "parameter encoder")

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        with zipfile.ZipFile(path, "w") as zf:
            _write_entry(zf, "meta.json",
                         json.dumps(self.meta, indent=1, sort_keys=True).encode())
            buf = io.BytesIO()
            _save_field(self.canonical, buf)
            _write_entry(zf, "canonical.gsur", buf.getvalue())
            if self.fsim is not None:
                for key, arr in sorted(self.fsim.state().items()):
                    _write_entry(zf, f"weights/sim/{key}.npy", _npy_bytes(arr))
            for task, net in sorted(self.fvis.items()):
                for key, arr in sorted(net.state().items()):
                    _write_entry(zf, f"weights/vis_{task}/{key}.npy", _npy_bytes(arr))

    @classmethod
    def load(cls, path, dtype=None) -> "ModelBundle":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"bundle not found: {path}")
        try:
            zf = zipfile.ZipFile(path)
        except zipfile.BadZipFile as e:
            raise ConfigError(f"corrupt bundle {path}: {e}") from e
        with zf:
            names = set(zf.namelist())
            if "meta.json" not in names or "canonical.gsur" not in names:
                raise ConfigError(f"corrupt bundle {path}: missing meta or field")
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise ConfigError(f"unsupported bundle format {meta.get('format_version')}")
            canonical = _load_field(io.BytesIO(zf.read("canonical.gsur")), dtype=dtype)
            fsim = None
            nets = meta.get("networks", {})
            if "sim" in nets:
                m = nets["sim"]
                fsim = SimDeformer(config_from_meta(m["config"]), m["param_dim"],
                                   scene_center=m["scene_center"],
                                   scene_half_extent=m["scene_half_extent"])
                fsim.load_state(_read_blocks(zf, names, "weights/sim/"))
            fvis = {}
            for key, m in nets.items():
                if not key.startswith("vis_"):
                    continue
                task = key[4:]
                net = VisDeformer(config_from_meta(m["config"]), m["kind"],
                                  scene_center=m["scene_center"],
                                  scene_half_extent=m["scene_half_extent"])
                net.load_state(_read_blocks(zf, names, f"weights/vis_{task}/"))
                fvis[task] = net
        return cls(canonical, fsim, fvis, meta)

    # -- inference -------------------------------------------------------

    def request_camera(self, spec: dict) -> Camera:
        img = self.meta["image"]
        if "view" in spec:
            return Camera(np.asarray(spec["view"], dtype=np.float64),
                          float(spec.get("focal", img["focal"])),
                          img["width"], img["height"], img["near"], img["far"])
        return Camera.orbit(float(spec["azimuth"]), float(spec["elevation"]),
                            float(spec["radius"]), width=img["width"],
                            height=img["height"], focal=img["focal"],
                            near=img["near"], far=img["far"])

    def deformed_arrays(self, p_sim_raw, task: Optional[str] = None,
                        p_vis_raw=None) -> tuple:
        """(attribute arrays at the requested parameters, clamp flag)."""
        bounds = np.asarray(self.meta["simulation"]["bounds"], dtype=np.float64)
        p = ParamVector.from_raw(p_sim_raw, bounds, "simulation")
        clamped = p.was_clamped_from(p_sim_raw, bounds)
        key = (tuple(np.round(p.values, 9)), task)
        if task is not None:
            if task not in self.fvis:
                raise KeyError(f"task '{task}' not in bundle")
            if p_vis_raw is None:
                raise ConfigError(f"task '{task}' requires visualization parameters")
            vb = np.asarray(self.meta["tasks"][task]["bounds"], dtype=np.float64)
            pv = ParamVector.from_raw(p_vis_raw, vb, self.fvis[task].vis_kind)
            clamped = clamped or pv.was_clamped_from(p_vis_raw, vb)
            key = key + (tuple(np.round(pv.values, 9)),)
        with self._cache_lock:
            if key in self._deform_cache:
                self._deform_cache.move_to_end(key)
                return self._deform_cache[key], clamped
        deformed, _offs, z_p = self.fsim.deform(self.canonical, p)
        if task is not None:
            deformed, _ = self.fvis[task].deform(deformed, z_p, pv)
        arrays = {a: t.data for a, t in deformed.items()}
        with self._cache_lock:
            self._deform_cache[key] = arrays
            while len(self._deform_cache) > 16:
                self._deform_cache.popitem(last=False)
        return arrays, clamped

    def render(self, camera_spec: dict, p_sim_raw, task: Optional[str] = None,
               p_vis_raw=None, n_threads: int = 1) -> tuple:
        """(HxWx3 image, clamp flag) for one exploration request."""
        cam = self.request_camera(camera_spec)
        arrays, clamped = self.deformed_arrays(p_sim_raw, task, p_vis_raw)
        fb = render_arrays(arrays, self.canonical.sh_degree, cam, n_threads=n_threads)
        return fb.rgb, clamped


def _save_field(fld: GaussianField, buf) -> None:
    import struct
    from .gaussians import _ATTRS, _MAGIC, _VERSION
    buf.write(_MAGIC)
    buf.write(struct.pack("<III", _VERSION, fld.n, fld.sh_degree))
    for name in _ATTRS:
        buf.write(np.ascontiguousarray(getattr(fld, name).data, dtype="<f4").tobytes())


def _load_field(buf, dtype=None) -> GaussianField:
    import tempfile
    with tempfile.NamedTemporaryFile(suffix=".gsur") as tmp:
        tmp.write(buf.read())
        tmp.flush()
        return GaussianField.load(tmp.name, dtype=dtype)


def _read_blocks(zf: zipfile.ZipFile, names, prefix: str) -> Dict[str, np.ndarray]:
    blocks = {}
    for name in names:
        if name.startswith(prefix) and name.endswith(".npy"):
            key = name[len(prefix):-4]
            blocks[key] = np.load(io.BytesIO(zf.read(name)))
    return blocks


def build_meta(manifest: dict, image: Optional[dict] = None,
               fsim: Optional[SimDeformer] = None,
               fvis: Optional[Dict[str, VisDeformer]] = None,
               orbit_radius: float = 3.2) -> dict:
    """Assemble bundle metadata from a dataset manifest and trained nets."""
    cams = manifest.get("cameras", [])
    if image is None:
        c0 = cams[0]
        image = {"width": c0["width"], "height": c0["height"], "focal": c0["focal"],
                 "near": c0["near"], "far": c0["far"]}
        orbit_radius = c0.get("radius", orbit_radius)
    vis = manifest["parameters"]["visualization"]
    tasks = {}
    for task, net in (fvis or {}).items():
        entry = {"bounds": vis["bounds"], "kind": net.vis_kind}
        if vis.get("base_tf"):
            entry["base_tf"] = vis["base_tf"]
        tasks[task] = entry
    networks = {}
    if fsim is not None:
        networks["sim"] = fsim.meta()
    for task, net in (fvis or {}).items():
        networks[f"vis_{task}"] = net.meta()
    return {
        "format_version": FORMAT_VERSION,
        "image": image,
        "scene": {"center": [0.0, 0.0, 0.0], "half_extent": SCENE_BOUND,
                  "orbit_radius": orbit_radius},
        "simulation": dict(manifest["parameters"]["simulation"]),
        "tasks": tasks,
        "networks": networks,
    }
