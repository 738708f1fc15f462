"""Pure-numpy tile blending kernels (fallback backend).

Same contract as the compiled backend in ``_blend_cy.pyx``: tiles are
processed independently, pixels inside a tile composit front-to-back over
the tile's depth-sorted instance range. Contributions with alpha below
ALPHA_MIN (or a non-negative exponent) are rejected, alpha is clamped at
ALPHA_MAX, and blending stops once transmittance drops under T_EPS.
"""

from __future__ import annotations

import numpy as np

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_EPS = 1e-4

BACKEND = "python"


def _tile_pixels(tile_id, tiles_x, tile_size, width, height, dtype):
    ty, tx = divmod(tile_id, tiles_x)
    x0, y0 = tx * tile_size, ty * tile_size
    xs = np.arange(x0, min(x0 + tile_size, width))
    ys = np.arange(y0, min(y0 + tile_size, height))
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel().astype(dtype), gy.ravel().astype(dtype), ys, xs


def _pmin_table(inst_alpha):
    # Conservative exponent threshold below which alpha < ALPHA_MIN is certain.
    arr = np.asarray(inst_alpha)
    return np.ascontiguousarray(np.log(ALPHA_MIN / np.maximum(arr, 1e-12)) - 1e-4,
                                dtype=arr.dtype)


def blend_forward(inst_mean, inst_conic, inst_color, inst_alpha, tile_ranges,
                  tiles_x, tile_size, width, height, bg,
                  out_rgb, out_t, out_last, n_threads=1, inst_pmin=None):
    dtype = inst_mean.dtype
    if inst_pmin is None:
        inst_pmin = _pmin_table(inst_alpha)
    n_tiles = len(tile_ranges) - 1
    for tid in range(n_tiles):
        start, end = int(tile_ranges[tid]), int(tile_ranges[tid + 1])
        px, py, ys, xs = _tile_pixels(tid, tiles_x, tile_size, width, height, dtype)
        P = px.size
        T = np.ones(P, dtype=dtype)
        rgb = np.zeros((P, 3), dtype=dtype)
        last = np.full(P, start, dtype=np.int64)
        alive = np.ones(P, dtype=bool)
        for j in range(start, end):
            if not alive.any():
                break
            a, b, c = inst_conic[j]
            dx = px - inst_mean[j, 0]
            dy = py - inst_mean[j, 1]
            power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
            alpha = np.minimum(inst_alpha[j] * np.exp(power), ALPHA_MAX)
            valid = alive & (power <= 0) & (power >= inst_pmin[j]) & (alpha >= ALPHA_MIN)
            w = np.where(valid, T * alpha, 0)
            rgb += w[:, None] * inst_color[j][None, :]
            T = np.where(valid, T * (1 - alpha), T)
            last[alive] = j + 1
            alive &= T >= T_EPS
        rgb += T[:, None] * np.asarray(bg, dtype=dtype)[None, :]
        shape = (len(ys), len(xs))
        out_rgb[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = rgb.reshape(shape + (3,))
        out_t[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = T.reshape(shape)
        out_last[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = last.reshape(shape)


def blend_backward(inst_mean, inst_conic, inst_color, inst_alpha, tile_ranges,
                   tiles_x, tile_size, width, height, bg,
                   out_t, out_last, grad_rgb, grad_inst, n_threads=1, inst_pmin=None):
    """Gradient of blend_forward w.r.t. per-instance mean/conic/color/alpha.

    ``grad_inst`` is (M, 9): d(mean x,y), d(conic a,b,c), d(color r,g,b),
    d(alpha0); accumulated in place.
    """
    dtype = inst_mean.dtype
    if inst_pmin is None:
        inst_pmin = _pmin_table(inst_alpha)
    bg = np.asarray(bg, dtype=dtype)
    n_tiles = len(tile_ranges) - 1
    for tid in range(n_tiles):
        start, end = int(tile_ranges[tid]), int(tile_ranges[tid + 1])
        if end == start:
            continue
        px, py, ys, xs = _tile_pixels(tid, tiles_x, tile_size, width, height, dtype)
        g = grad_rgb[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1].reshape(-1, 3).astype(dtype)
        T = out_t[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1].ravel().astype(dtype)
        last = out_last[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1].ravel()
        S = T[:, None] * bg[None, :]
        for j in range(end - 1, start - 1, -1):
            a, b, c = inst_conic[j]
            color = inst_color[j]
            dx = px - inst_mean[j, 0]
            dy = py - inst_mean[j, 1]
            power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
            alpha_raw = inst_alpha[j] * np.exp(power)
            alpha = np.minimum(alpha_raw, ALPHA_MAX)
            valid = (last > j) & (power <= 0) & (power >= inst_pmin[j]) & (alpha >= ALPHA_MIN)
            one_m = 1 - alpha
            T_before = np.where(valid, T / one_m, T)
            contrib = np.where(valid, alpha * T_before, 0)
            grad_inst[j, 5:8] += contrib @ g
            dalpha = np.einsum("pc,pc->p", g, color[None, :] * T_before[:, None] - S / one_m[:, None])
            flow = valid & (alpha_raw <= ALPHA_MAX)
            dalpha = np.where(flow, dalpha, 0)
            G = np.exp(power)
            grad_inst[j, 8] += float(np.sum(dalpha * G))
            dpower = dalpha * alpha
            grad_inst[j, 2] += float(np.sum(dpower * (-0.5 * dx * dx)))
            grad_inst[j, 3] += float(np.sum(dpower * (-dx * dy)))
            grad_inst[j, 4] += float(np.sum(dpower * (-0.5 * dy * dy)))
            grad_inst[j, 0] += float(np.sum(dpower * (a * dx + b * dy)))
            grad_inst[j, 1] += float(np.sum(dpower * (b * dx + c * dy)))
            S = np.where(valid[:, None], S + color[None, :] * contrib[:, None], S)
            T = T_before
