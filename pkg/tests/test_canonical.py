import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensplat import autodiff as ad
from ensplat import canonical as cn
from ensplat.errors import ContractError, NumericError
from ensplat.gaussians import GaussianField
from ensplat.rasterizer import DensifyStats
from ensplat.synthdata import SyntheticEnsemble, TransferFunction

from oracles import random_scene


def test_init_single_blob_concentration():
    sigma = 0.25
    f = lambda x: np.exp(-(x ** 2).sum(1) / (2 * sigma * sigma))
    tf = TransferFunction.base()
    fld = cn.init_from_volume(f, tf, 600, seed=0)
    r = np.linalg.norm(fld.mu.data, axis=1)
    frac = float((r <= 3 * sigma).mean())
    assert frac >= 0.95
    assert np.allclose(fld.opacities(), 0.1, atol=1e-5)


def test_init_single_point():
    f = lambda x: np.full(x.shape[0], 0.9)
    fld = cn.init_from_volume(f, TransferFunction.base(), 1, seed=1)
    assert fld.n == 1


def test_init_deterministic():
    ens = SyntheticEnsemble(sim_dim=2, seed=5)
    f = ens.field_fn([0.5, 0.5])
    a = cn.init_from_volume(f, TransferFunction.base(), 100, seed=3)
    b = cn.init_from_volume(f, TransferFunction.base(), 100, seed=3)
    assert np.array_equal(a.mu.data, b.mu.data)


def test_init_zero_opacity_errors():
    f = lambda x: np.zeros(x.shape[0])
    with pytest.raises(NumericError):
        cn.init_from_volume(f, TransferFunction.base(), 10, seed=0, max_batches=5)


def _field_with(opacities, rng=None, grads=None, scales=None):
    rng = rng or np.random.default_rng(0)
    n = len(opacities)
    spec = random_scene(rng, n=n)
    spec["opacity_logit"] = ad.logit_np(np.asarray(opacities))[:, None]
    if scales is not None:
        spec["log_scale"] = np.log(np.asarray(scales))
    fld = GaussianField(**spec, sh_degree=1)
    stats = DensifyStats(n)
    if grads is not None:
        stats.grad2d_sum[:] = np.asarray(grads)
        stats.seen[:] = 1
    return fld, stats


def test_densify_noop():
    fld, stats = _field_with([0.9] * 4)
    rng = np.random.default_rng(1)
    report = cn.densify_and_prune(fld, stats, cn.DensifyPolicy(), rng)
    assert report == {"pruned": 0, "cloned": 0, "split": 0}
    assert fld.n == 4


def test_densify_prunes_transparent():
    fld, stats = _field_with([0.9, 0.001, 0.9])
    rng = np.random.default_rng(2)
    report = cn.densify_and_prune(fld, stats, cn.DensifyPolicy(), rng)
    assert report["pruned"] == 1
    assert fld.n == 2
    assert np.all(fld.opacities() >= 0.005)


def test_densify_clone_small_hot():
    scales = np.full((3, 3), 0.003)
    fld, stats = _field_with([0.9, 0.9, 0.9], grads=[1.0, 0.0, 0.0], scales=scales)
    rng = np.random.default_rng(3)
    report = cn.densify_and_prune(fld, stats, cn.DensifyPolicy(grad_threshold=0.5), rng)
    assert report == {"pruned": 0, "cloned": 1, "split": 0}
    assert fld.n == 4


def test_densify_split_large_hot():
    scales = np.full((3, 3), 0.5)
    fld, stats = _field_with([0.9, 0.9, 0.9], grads=[0.0, 1.0, 0.0], scales=scales)
    rng = np.random.default_rng(4)
    report = cn.densify_and_prune(fld, stats, cn.DensifyPolicy(grad_threshold=0.5), rng)
    assert report == {"pruned": 0, "cloned": 0, "split": 1}
    assert fld.n == 4
    # both children (replaced row 1, appended row 3) shrink by the divisor
    child_scales = np.exp(fld.log_scale.data[[1, 3]])
    assert np.allclose(child_scales, 0.5 / 1.6, rtol=1e-5)
    assert np.allclose(np.exp(fld.log_scale.data[[0, 2]]), 0.5, rtol=1e-5)


def test_densify_cap_respected():
    scales = np.full((5, 3), 0.003)
    fld, stats = _field_with([0.9] * 5, grads=[1.0] * 5, scales=scales)
    rng = np.random.default_rng(5)
    pol = cn.DensifyPolicy(grad_threshold=0.5, max_gaussians=5)
    report = cn.densify_and_prune(fld, stats, pol, rng)
    assert report["cloned"] == 0 and report["split"] == 0
    assert fld.n == 5


def test_densify_stats_reset():
    fld, stats = _field_with([0.9, 0.9], grads=[1.0, 1.0])
    rng = np.random.default_rng(6)
    cn.densify_and_prune(fld, stats, cn.DensifyPolicy(grad_threshold=10.0), rng)
    assert np.all(stats.grad2d_sum == 0)
    assert stats.n == fld.n


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_densify_bookkeeping_identity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    opac = rng.uniform(0.001, 0.99, n)
    grads = rng.uniform(0, 2e-4, n)
    scales = np.exp(rng.uniform(np.log(1e-3), np.log(0.3), (n, 3)))
    fld, stats = _field_with(opac, rng=rng, grads=grads, scales=scales)
    pol = cn.DensifyPolicy(max_gaussians=int(rng.integers(n, 2 * n + 5)))
    before = fld.n
    report = cn.densify_and_prune(fld, stats, pol, np.random.default_rng(seed + 1))
    assert fld.n == before - report["pruned"] + report["cloned"] + report["split"]
    assert fld.n <= max(pol.max_gaussians, before)
    assert np.all(fld.opacities() >= pol.opacity_prune_threshold) or fld.n == 1


def test_densify_remaps_optimizer_state():
    fld, stats = _field_with([0.9, 0.001, 0.9], grads=[0, 0, 0])
    cfg = cn.CanonicalConfig()
    opt = cn.make_canonical_optimizer(fld, cfg)
    # fake some moments
    for g in opt.groups:
        g["state"].m[0][:] = np.arange(g["state"].m[0].size).reshape(g["state"].m[0].shape)
    rng = np.random.default_rng(7)
    m_before = opt.groups[0]["state"].m[0].copy()
    cn.densify_and_prune(fld, stats, cn.DensifyPolicy(), rng, opt)
    m_after = opt.groups[0]["state"].m[0]
    assert m_after.shape == (2, 3)
    assert np.array_equal(m_after, m_before[[0, 2]])
