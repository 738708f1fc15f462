# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile blending kernels; contract mirrors _blend_py exactly.

Tiles run in parallel (OpenMP): each tile owns a disjoint pixel block in
the forward pass and a disjoint instance range in the backward pass, so
results are independent of the thread schedule.
"""

from cython.parallel import prange
cimport cython
from libc.math cimport exp

import numpy as np

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_EPS = 1e-4

BACKEND = "cython"

ctypedef fused floating:
    float
    double

cdef double _ALPHA_MIN = 1.0 / 255.0
cdef double _ALPHA_MAX = 0.99
cdef double _T_EPS = 1e-4


def blend_forward(floating[:, ::1] inst_mean, floating[:, ::1] inst_conic,
                  floating[:, ::1] inst_color, floating[::1] inst_alpha,
                  long long[::1] tile_ranges, int tiles_x, int tile_size,
                  int width, int height, floating[::1] bg,
                  floating[:, :, ::1] out_rgb, floating[:, ::1] out_t,
                  long long[:, ::1] out_last, int n_threads=1,
                  floating[::1] inst_pmin=None):
    cdef int n_tiles = tile_ranges.shape[0] - 1
    cdef int tid
    if inst_pmin is None:
        inst_pmin = _pmin_table(inst_alpha)
    for tid in prange(n_tiles, nogil=True, schedule="dynamic", num_threads=n_threads):
        _forward_tile(tid, inst_mean, inst_conic, inst_color, inst_alpha, inst_pmin,
                      tile_ranges, tiles_x, tile_size, width, height, bg,
                      out_rgb, out_t, out_last)


def _pmin_table(floating[::1] inst_alpha):
    # Conservative exponent threshold below which alpha < ALPHA_MIN is certain.
    import numpy as _np
    arr = _np.asarray(inst_alpha)
    return _np.ascontiguousarray(_np.log(_ALPHA_MIN / _np.maximum(arr, 1e-12)) - 1e-4,
                                 dtype=arr.dtype)


cdef void _forward_tile(int tid, floating[:, ::1] inst_mean, floating[:, ::1] inst_conic,
                        floating[:, ::1] inst_color, floating[::1] inst_alpha,
                        floating[::1] inst_pmin,
                        long long[::1] tile_ranges, int tiles_x, int tile_size,
                        int width, int height, floating[::1] bg,
                        floating[:, :, ::1] out_rgb, floating[:, ::1] out_t,
                        long long[:, ::1] out_last) nogil:
    cdef long long start = tile_ranges[tid]
    cdef long long end = tile_ranges[tid + 1]
    cdef int x0 = (tid % tiles_x) * tile_size
    cdef int y0 = (tid // tiles_x) * tile_size
    cdef int x1 = min(x0 + tile_size, width)
    cdef int y1 = min(y0 + tile_size, height)
    cdef int px, py
    cdef long long j, last
    cdef double T, r, g, b, dx, dy, power, alpha, w
    cdef double a, bb, c
    for py in range(y0, y1):
        for px in range(x0, x1):
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            last = start
            for j in range(start, end):
                a = inst_conic[j, 0]
                bb = inst_conic[j, 1]
                c = inst_conic[j, 2]
                dx = px - inst_mean[j, 0]
                dy = py - inst_mean[j, 1]
                power = -0.5 * (a * dx * dx + c * dy * dy) - bb * dx * dy
                last = j + 1
                if power > 0 or power < inst_pmin[j]:
                    continue
                alpha = inst_alpha[j] * exp(power)
                if alpha < _ALPHA_MIN:
                    continue
                if alpha > _ALPHA_MAX:
                    alpha = _ALPHA_MAX
                w = T * alpha
                r = r + w * inst_color[j, 0]
                g = g + w * inst_color[j, 1]
                b = b + w * inst_color[j, 2]
                T = T * (1.0 - alpha)
                if T < _T_EPS:
                    break
            out_rgb[py, px, 0] = <floating> (r + T * bg[0])
            out_rgb[py, px, 1] = <floating> (g + T * bg[1])
            out_rgb[py, px, 2] = <floating> (b + T * bg[2])
            out_t[py, px] = <floating> T
            out_last[py, px] = last


def blend_backward(floating[:, ::1] inst_mean, floating[:, ::1] inst_conic,
                   floating[:, ::1] inst_color, floating[::1] inst_alpha,
                   long long[::1] tile_ranges, int tiles_x, int tile_size,
                   int width, int height, floating[::1] bg,
                   floating[:, ::1] out_t, long long[:, ::1] out_last,
                   floating[:, :, ::1] grad_rgb, floating[:, ::1] grad_inst,
                   int n_threads=1, floating[::1] inst_pmin=None):
    cdef int n_tiles = tile_ranges.shape[0] - 1
    cdef int tid
    if inst_pmin is None:
        inst_pmin = _pmin_table(inst_alpha)
    for tid in prange(n_tiles, nogil=True, schedule="dynamic", num_threads=n_threads):
        _backward_tile(tid, inst_mean, inst_conic, inst_color, inst_alpha, inst_pmin,
                       tile_ranges, tiles_x, tile_size, width, height, bg,
                       out_t, out_last, grad_rgb, grad_inst)


cdef void _backward_tile(int tid, floating[:, ::1] inst_mean, floating[:, ::1] inst_conic,
                         floating[:, ::1] inst_color, floating[::1] inst_alpha,
                         floating[::1] inst_pmin,
                         long long[::1] tile_ranges, int tiles_x, int tile_size,
                         int width, int height, floating[::1] bg,
                         floating[:, ::1] out_t, long long[:, ::1] out_last,
                         floating[:, :, ::1] grad_rgb, floating[:, ::1] grad_inst) nogil:
    cdef long long start = tile_ranges[tid]
    cdef long long end = tile_ranges[tid + 1]
    if end == start:
        return
    cdef int x0 = (tid % tiles_x) * tile_size
    cdef int y0 = (tid // tiles_x) * tile_size
    cdef int x1 = min(x0 + tile_size, width)
    cdef int y1 = min(y0 + tile_size, height)
    cdef int px, py
    cdef long long j, last
    cdef double T, T_before, dx, dy, power, alpha_raw, alpha, one_m, contrib
    cdef double a, bb, c, g0, g1, g2, s0, s1, s2, dalpha, dpower, G
    for py in range(y0, y1):
        for px in range(x0, x1):
            last = out_last[py, px]
            if last <= start:
                continue
            T = out_t[py, px]
            g0 = grad_rgb[py, px, 0]
            g1 = grad_rgb[py, px, 1]
            g2 = grad_rgb[py, px, 2]
            s0 = T * bg[0]
            s1 = T * bg[1]
            s2 = T * bg[2]
            for j in range(last - 1, start - 1, -1):
                a = inst_conic[j, 0]
                bb = inst_conic[j, 1]
                c = inst_conic[j, 2]
                dx = px - inst_mean[j, 0]
                dy = py - inst_mean[j, 1]
                power = -0.5 * (a * dx * dx + c * dy * dy) - bb * dx * dy
                if power > 0 or power < inst_pmin[j]:
                    continue
                G = exp(power)
                alpha_raw = inst_alpha[j] * G
                alpha = alpha_raw
                if alpha > _ALPHA_MAX:
                    alpha = _ALPHA_MAX
                if alpha < _ALPHA_MIN:
                    continue
                one_m = 1.0 - alpha
                T_before = T / one_m
                contrib = alpha * T_before
                grad_inst[j, 5] += <floating> (contrib * g0)
                grad_inst[j, 6] += <floating> (contrib * g1)
                grad_inst[j, 7] += <floating> (contrib * g2)
                if alpha_raw <= _ALPHA_MAX:
                    dalpha = (g0 * (inst_color[j, 0] * T_before - s0 / one_m)
                              + g1 * (inst_color[j, 1] * T_before - s1 / one_m)
                              + g2 * (inst_color[j, 2] * T_before - s2 / one_m))
                    grad_inst[j, 8] += <floating> (dalpha * G)
                    dpower = dalpha * alpha
                    grad_inst[j, 2] += <floating> (dpower * (-0.5 * dx * dx))
                    grad_inst[j, 3] += <floating> (dpower * (-dx * dy))
                    grad_inst[j, 4] += <floating> (dpower * (-0.5 * dy * dy))
                    grad_inst[j, 0] += <floating> (dpower * (a * dx + bb * dy))
                    grad_inst[j, 1] += <floating> (dpower * (bb * dx + c * dy))
                s0 = s0 + inst_color[j, 0] * contrib
                s1 = s1 + inst_color[j, 1] * contrib
                s2 = s2 + inst_color[j, 2] * contrib
                T = T_before
