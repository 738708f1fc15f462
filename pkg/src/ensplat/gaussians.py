"""Gaussian primitive storage, activations, covariance assembly, SH color.

Attributes are stored pre-activation (log scale, opacity logit) so additive
deformation offsets keep the activated quantities in their valid ranges.
Fields are struct-of-arrays over N primitives; every attribute array is a
trainable autodiff parameter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericError, ShapeError

# Real spherical harmonic constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sh_dim(degree: int) -> int:
    """Coefficients per color channel for SH of the given degree."""
    return (degree + 1) ** 2


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w,x,y,z) quaternions, normalized internally.

    Accepts (4,) or (N,4); returns (3,3) or (N,3,3).
    """
    q = np.asarray(q)
    single = q.ndim == 1
    qs = np.atleast_2d(q)
    norm = np.linalg.norm(qs, axis=1)
    if np.any(norm < 1e-12):
        raise NumericError("degenerate rotation: zero-norm quaternion")
    w, x, y, z = (qs / norm[:, None]).T
    R = np.empty((qs.shape[0], 3, 3), dtype=qs.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def build_covariance(log_scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)). Vectorized over N."""
    ls = np.asarray(log_scale)
    single = ls.ndim == 1
    ls = np.atleast_2d(ls)
    R = quat_to_rotmat(rot)
    if R.ndim == 2:
        R = R[None]
    s = np.exp(ls)
    M = R * s[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    return cov[0] if single else cov


def eval_gaussian(mu: np.ndarray, cov: np.ndarray, x: np.ndarray, eps: float = 1e-8) -> float:
    """Unnormalized Gaussian density exp(-0.5 d^T Sigma^-1 d) at ``x``."""
    d = np.asarray(x, dtype=float) - np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    try:
        sol = np.linalg.solve(cov + eps * np.eye(3), d)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"singular covariance: {e}") from e
    return float(np.exp(-0.5 * d @ sol))


def sh_basis(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """SH basis values at unit directions; (B,) for one dir or (N,B)."""
    v = np.asarray(view_dir)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    cols = [np.full(v.shape[0], SH_C0, dtype=v.dtype)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    basis = np.stack(cols, axis=1)
    return basis[0] if single else basis


def sh_basis_grad(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction components) at unit directions: (N, B, 3)."""
    v = np.atleast_2d(np.asarray(view_dir))
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    n = v.shape[0]
    zero = np.zeros(n, dtype=v.dtype)
    rows = [np.stack([zero, zero, zero], axis=1)]
    if degree >= 1:
        c1 = np.full(n, SH_C1, dtype=v.dtype)
        rows += [
            np.stack([zero, -c1, zero], axis=1),
            np.stack([zero, zero, c1], axis=1),
            np.stack([-c1, zero, zero], axis=1),
        ]
    if degree >= 2:
        k0, k1, k2, k3, k4 = SH_C2
        rows += [
            np.stack([k0 * y, k0 * x, zero], axis=1),
            np.stack([zero, k1 * z, k1 * y], axis=1),
            np.stack([-2 * k2 * x, -2 * k2 * y, 4 * k2 * z], axis=1),
            np.stack([k3 * z, zero, k3 * x], axis=1),
            np.stack([2 * k4 * x, -2 * k4 * y, zero], axis=1),
        ]
    if degree >= 3:
        m0, m1, m2, m3, m4, m5, m6 = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            np.stack([6 * m0 * x * y, m0 * (3 * xx - 3 * yy), zero], axis=1),
            np.stack([m1 * y * z, m1 * x * z, m1 * x * y], axis=1),
            np.stack([-2 * m2 * x * y, m2 * (4 * zz - xx - 3 * yy), 8 * m2 * y * z], axis=1),
            np.stack([-6 * m3 * x * z, -6 * m3 * y * z, m3 * (6 * zz - 3 * xx - 3 * yy)], axis=1),
            np.stack([m4 * (4 * zz - 3 * xx - yy), -2 * m4 * x * y, 8 * m4 * x * z], axis=1),
            np.stack([2 * m5 * x * z, -2 * m5 * y * z, m5 * (xx - yy)], axis=1),
            np.stack([m6 * (3 * xx - 3 * yy), -6 * m6 * x * y, zero], axis=1),
        ]
    return np.stack(rows, axis=1)


def eval_sh(sh: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """RGB from SH coefficients: 0.5 DC offset added, clamped to [0,1].

    ``sh`` is (3*B,) or (N, 3*B), channel-major blocks [r0..rB, g0.., b0..].
    """
    sh = np.asarray(sh)
    single = sh.ndim == 1
    sh = np.atleast_2d(sh)
    B = sh_dim(degree)
    if sh.shape[1] != 3 * B:
        raise ShapeError(f"expected {3 * B} SH coefficients for degree {degree}, got {sh.shape[1]}")
    basis = sh_basis(view_dir, degree)
    if basis.ndim == 1:
        basis = np.broadcast_to(basis, (sh.shape[0], B))
    coeffs = sh.reshape(sh.shape[0], 3, B)
    rgb = np.einsum("ncb,nb->nc", coeffs, basis) + 0.5
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb[0] if single else rgb


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """Inverse of the DC band of eval_sh (ignoring the clamp)."""
    return (np.asarray(rgb) - 0.5) / SH_C0


@dataclass
class Camera:
    """Pinhole camera: ``view`` maps world to camera space, +z forward.

    Pixel centers sit at integer coordinates; the principal point is the
    image center (width-1)/2, (height-1)/2.
    """

    view: np.ndarray
    focal: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.view = np.asarray(self.view, dtype=np.float64)
        if self.view.shape != (4, 4):
            raise ShapeError(f"view must be 4x4, got {self.view.shape}")
        R = self.view[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5) or np.linalg.det(R) < 0:
            raise ContractError("view rotation block is not a proper rotation")
        if not (0 < self.near < self.far):
            raise ContractError(f"need 0 < near < far, got {self.near}, {self.far}")

    @property
    def position(self) -> np.ndarray:
        R, t = self.view[:3, :3], self.view[:3, 3]
        return -R.T @ t

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, focal: float,
                up=(0.0, 0.0, 1.0), near: float = 0.05, far: float = 100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ContractError("camera eye coincides with target")
        fwd = fwd / n
        up = np.asarray(up, dtype=np.float64)
        if abs(fwd @ up) > 0.999 * np.linalg.norm(up):
            up = np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        view = np.eye(4)
        view[0, :3], view[1, :3], view[2, :3] = right, down, fwd
        view[:3, 3] = -view[:3, :3] @ eye
        return cls(view, focal, width, height, near, far)

    @classmethod
    def orbit(cls, azimuth: float, elevation: float, radius: float, target=(0.0, 0.0, 0.0),
              width: int = 64, height: int = 64, focal: float = 80.0,
              near: float = 0.05, far: float = 100.0) -> "Camera":
        """Camera on a sphere around ``target``; angles in degrees, z up."""
        az, el = np.radians(azimuth), np.radians(elevation)
        offset = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        return cls.look_at(np.asarray(target, dtype=np.float64) + offset, target,
                           width, height, focal, near=near, far=far)


_MAGIC = b"GSUR"
_VERSION = 1
_ATTRS = ("mu", "log_scale", "rot", "sh", "opacity_logit")


class GaussianField:
    """Struct-of-arrays over N Gaussian primitives; attributes are Parameters."""

    def __init__(self, mu, log_scale, rot, sh, opacity_logit, sh_degree: int = 1, dtype=None):
        dtype = dtype if dtype is not None else ad.default_dtype()
        self.sh_degree = int(sh_degree)
        self.mu = ad.parameter(np.asarray(mu, dtype=dtype), name="mu")
        self.log_scale = ad.parameter(np.asarray(log_scale, dtype=dtype), name="log_scale")
        self.rot = ad.parameter(np.asarray(rot, dtype=dtype), name="rot")
        self.sh = ad.parameter(np.asarray(sh, dtype=dtype), name="sh")
        self.opacity_logit = ad.parameter(np.asarray(opacity_logit, dtype=dtype).reshape(-1, 1),
                                          name="opacity_logit")
        self._validate()

    def _validate(self):
        n = self.mu.data.shape[0]
        if n < 1:
            raise ContractError("field must contain at least one Gaussian")
        expect = {
            "mu": (n, 3), "log_scale": (n, 3), "rot": (n, 4),
            "sh": (n, 3 * sh_dim(self.sh_degree)), "opacity_logit": (n, 1),
        }
        for name, shape in expect.items():
            got = getattr(self, name).data.shape
            if got != shape:
                raise ShapeError(f"{name}: expected {shape}, got {got}")

    @property
    def n(self) -> int:
        return self.mu.data.shape[0]

    def parameters(self) -> list:
        return [self.mu, self.log_scale, self.rot, self.sh, self.opacity_logit]

    def attribute_arrays(self) -> dict:
        return {name: getattr(self, name).data for name in _ATTRS}

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale.data)

    def opacities(self) -> np.ndarray:
        return ad.sigmoid_np(self.opacity_logit.data[:, 0])

    def covariances(self) -> np.ndarray:
        return build_covariance(self.log_scale.data, self.rot.data)

    def replace_arrays(self, **arrays) -> None:
        """Swap attribute buffers in place (densification); grads reset."""
        for name, arr in arrays.items():
            t = getattr(self, name)
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)
            t.grad = None
        self._validate()

    def copy(self) -> "GaussianField":
        return GaussianField(self.mu.data.copy(), self.log_scale.data.copy(),
                             self.rot.data.copy(), self.sh.data.copy(),
                             self.opacity_logit.data.copy(), self.sh_degree,
                             dtype=self.mu.data.dtype)

    # binary container: magic, u32 version, u32 N, u32 sh_degree, then
    # little-endian f32 arrays in declared attribute order
    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<III", _VERSION, self.n, self.sh_degree))
            for name in _ATTRS:
                f.write(np.ascontiguousarray(getattr(self, name).data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, dtype=None) -> "GaussianField":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _MAGIC:
                raise ContractError(f"not a Gaussian field container (magic {magic!r})")
            version, n, degree = struct.unpack("<III", f.read(12))
            if version != _VERSION:
                raise ContractError(f"unsupported container version {version}")
            widths = {"mu": 3, "log_scale": 3, "rot": 4, "sh": 3 * sh_dim(degree), "opacity_logit": 1}
            arrays = {}
            for name in _ATTRS:
                w = widths[name]
                buf = f.read(4 * n * w)
                if len(buf) != 4 * n * w:
                    raise ContractError("truncated Gaussian field container")
                arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(n, w).copy()
        return cls(arrays["mu"], arrays["log_scale"], arrays["rot"], arrays["sh"],
                   arrays["opacity_logit"], sh_degree=degree, dtype=dtype)
