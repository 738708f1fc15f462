"""Differentiable tiled splatting renderer."""

from __future__ import annotations

import numpy as np

from . import kernels
from .render import (COV2D_DILATION, TILE_SIZE, Framebuffer, RenderCache,
                     blend_pixel, render, render_arrays, render_backward)

__all__ = [
    "COV2D_DILATION", "TILE_SIZE", "Framebuffer", "RenderCache", "DensifyStats",
    "blend_pixel", "render", "render_arrays", "render_backward", "kernels",
]


class DensifyStats:
    """Running screen-space gradient stats consumed by density control.

    Tracks, per Gaussian, the mean 2D positional gradient norm over the
    backward passes in which it was visible, the mean 3D positional
    gradient (nudge direction for clones), and the max observed footprint
    radius.
    """

    def __init__(self, n: int):
        self.grad2d_sum = np.zeros(n)
        self.grad3d_sum = np.zeros((n, 3))
        self.seen = np.zeros(n, dtype=np.int64)
        self.max_radius = np.zeros(n)

    @property
    def n(self) -> int:
        return self.seen.shape[0]

    def accumulate(self, aux: dict, grad_mu: np.ndarray) -> None:
        vis = aux["visible"]
        self.grad2d_sum[vis] += aux["grad2d_norm"][vis]
        self.grad3d_sum[vis] += grad_mu[vis]
        self.seen[vis] += 1
        self.max_radius = np.maximum(self.max_radius, aux["radius"])

    def mean_grad2d(self) -> np.ndarray:
        return self.grad2d_sum / np.maximum(self.seen, 1)

    def mean_grad3d(self) -> np.ndarray:
        return self.grad3d_sum / np.maximum(self.seen, 1)[:, None]

    def reset(self) -> None:
        self.grad2d_sum[:] = 0
        self.grad3d_sum[:] = 0
        self.seen[:] = 0
        self.max_radius[:] = 0


def accumulate_densify_stats(stats: DensifyStats, aux: dict, grad_mu: np.ndarray) -> None:
    stats.accumulate(aux, grad_mu)
