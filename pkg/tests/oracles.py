"""Independent reference implementations used as test oracles.

Deliberately written with plain per-splat loops and numpy.linalg, sharing
no code with the production renderer: every splat is evaluated at every
pixel, sorted globally, with no tiling or footprint culling.
"""

import numpy as np

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_EPS = 1e-4

SH0 = 0.28209479177387814
SH1 = 0.4886025119029199


def quat_rotmat(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sh_color(coeffs, view_dir, degree):
    x, y, z = view_dir
    basis = [SH0]
    if degree >= 1:
        basis += [-SH1 * y, SH1 * z, -SH1 * x]
    basis = np.asarray(basis)
    c = coeffs.reshape(3, -1)[:, : basis.size] @ basis + 0.5
    return np.clip(c, 0.0, 1.0)


def render_bruteforce(arrays, sh_degree, cam, bg=(1.0, 1.0, 1.0)):
    """Reference renderer: full per-pixel compositing over all splats."""
    mu = np.asarray(arrays["mu"], dtype=float)
    n = mu.shape[0]
    R = cam.view[:3, :3]
    t0 = cam.view[:3, 3]
    f = cam.focal
    campos = -R.T @ t0

    splats = []
    for i in range(n):
        t = R @ mu[i] + t0
        if not (cam.near < t[2] < cam.far):
            continue
        s = np.exp(np.asarray(arrays["log_scale"][i], dtype=float))
        Rq = quat_rotmat(np.asarray(arrays["rot"][i], dtype=float))
        M = Rq @ np.diag(s)
        cov3 = M @ M.T
        J = np.array([
            [f / t[2], 0, -f * t[0] / t[2] ** 2],
            [0, f / t[2], -f * t[1] / t[2] ** 2],
        ])
        A = J @ R
        cov2 = A @ cov3 @ A.T + 0.3 * np.eye(2)
        conic = np.linalg.inv(cov2)
        mean2d = np.array([f * t[0] / t[2] + cam.cx, f * t[1] / t[2] + cam.cy])
        d = mu[i] - campos
        color = sh_color(np.asarray(arrays["sh"][i], dtype=float), d / np.linalg.norm(d), sh_degree)
        o = 1.0 / (1.0 + np.exp(-float(arrays["opacity_logit"][i])))
        splats.append((t[2], i, mean2d, conic, color, o))

    splats.sort(key=lambda rec: (rec[0], rec[1]))
    img = np.zeros((cam.height, cam.width, 3))
    bg = np.asarray(bg, dtype=float)
    for py in range(cam.height):
        for px in range(cam.width):
            T = 1.0
            rgb = np.zeros(3)
            for _depth, _i, mean2d, conic, color, o in splats:
                d = np.array([px, py], dtype=float) - mean2d
                power = -0.5 * d @ conic @ d
                if power > 0:
                    continue
                alpha = min(o * np.exp(power), ALPHA_MAX)
                if alpha < ALPHA_MIN:
                    continue
                rgb += T * alpha * color
                T *= 1.0 - alpha
                if T < T_EPS:
                    break
            img[py, px] = rgb + T * bg
    return img


def random_scene(rng, n=5, sh_degree=1, spread=0.35):
    """A small scene with opacities and colors away from clamp boundaries."""
    shdim = 3 * (sh_degree + 1) ** 2
    return {
        "mu": rng.normal(0, spread, (n, 3)),
        "log_scale": rng.normal(-1.3, 0.25, (n, 3)),
        "rot": rng.normal(0, 1, (n, 4)),
        "sh": rng.normal(0, 0.15, (n, shdim)),
        "opacity_logit": rng.uniform(-1.0, 1.2, (n, 1)),
    }
