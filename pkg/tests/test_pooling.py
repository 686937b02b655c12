import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gemret.backbone import TinyFCN
from gemret.gradcheck import power_mean_ld
from gemret.numerics import finite_diff_grad, relative_error
from gemret.pooling import (PoolingConfig, extract_descriptor, gem_backward_p, gem_backward_x,
                            gem_pool, mac_pool, pool, pool_backward_x, spoc_pool)


def col(*vals):
    return np.array(vals, dtype=float).reshape(-1, 1, 1)


def test_mac_examples():
    np.testing.assert_array_equal(mac_pool(col(1, 2, 3, 4)), [4])
    np.testing.assert_array_equal(mac_pool(np.zeros((3, 3, 2))), [0, 0])
    x = np.array([[1, 2], [5, 2]], dtype=float).reshape(2, 1, 2)  # maps [1,5] and [2,2]
    np.testing.assert_array_equal(mac_pool(x), [5, 2])


def test_spoc_examples():
    np.testing.assert_array_equal(spoc_pool(col(1, 2, 3, 4)), [2.5])
    np.testing.assert_allclose(spoc_pool(np.full((2, 3, 4), 0.7)), np.full(4, 0.7))
    np.testing.assert_array_equal(spoc_pool(col(0, 0, 0, 8)), [2])


def test_gem_examples():
    x = col(1, 2, 3, 4)
    np.testing.assert_allclose(gem_pool(x, PoolingConfig.gem(1)), [2.5], rtol=1e-12)
    np.testing.assert_allclose(gem_pool(x, PoolingConfig.gem(1e4)), [4.0], rtol=1e-3)
    np.testing.assert_allclose(gem_pool(x, PoolingConfig.gem(3)), [25 ** (1 / 3)], rtol=1e-12)
    assert gem_pool(x, PoolingConfig.gem(3))[0] == pytest.approx(2.924017, abs=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        PoolingConfig.gem(0.5)
    with pytest.raises(ValueError):
        PoolingConfig("gem", "shared", np.array([2.0, 3.0]))
    with pytest.raises(ValueError):
        PoolingConfig("median")
    assert PoolingConfig("max").exponents.size == 0
    assert PoolingConfig("average").exponents.size == 0
    cfg = PoolingConfig.gem(3.0)
    cfg.exponents[0] = 0.5  # bypassing the constructor is still caught at use
    with pytest.raises(ValueError):
        gem_pool(col(1, 2), cfg)


def test_per_map_exponents():
    x = np.random.default_rng(0).uniform(size=(4, 4, 3))
    cfg = PoolingConfig.gem(2.0, per_map=3)
    cfg.exponents[:] = [1.0, 2.0, 1e4]
    f = gem_pool(x, cfg)
    assert f[0] == pytest.approx(spoc_pool(x)[0], rel=1e-12)
    assert f[2] == pytest.approx(mac_pool(x)[2], rel=1e-3)
    with pytest.raises(ValueError):
        gem_pool(np.ones((2, 2, 4)), cfg)


def test_backward_x_examples():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 5, size=(3, 4, 2))
    cfg = PoolingConfig.gem(1.0)
    f = gem_pool(x, cfg)
    g = gem_backward_x(x, cfg, f, np.array([2.0, -1.0]))
    np.testing.assert_allclose(g[..., 0], 2.0 / 12)
    np.testing.assert_allclose(g[..., 1], -1.0 / 12)
    assert not gem_backward_x(x, PoolingConfig.gem(3), f, np.zeros(2)).any()
    with pytest.raises(ValueError):
        gem_backward_x(x, cfg, f, np.zeros(3))


def test_backward_p_constant_map_is_zero():
    x = np.full((3, 3, 2), 1.7)
    for p in (1.0, 2.5, 7.0):
        cfg = PoolingConfig.gem(p)
        f = gem_pool(x, cfg)
        assert gem_backward_p(x, cfg, f, np.ones(2))[0] == pytest.approx(0, abs=1e-12)
    cfg = PoolingConfig.gem(3)
    assert gem_backward_p(x, cfg, gem_pool(x, cfg), np.zeros(2)).tolist() == [0.0]
    with pytest.raises(ValueError):
        gem_backward_p(x, cfg, np.zeros(5), np.zeros(2))


def _ld_pool(x, p):
    return power_mean_ld(x, np.broadcast_to(p, x.shape[-1]))


@pytest.mark.parametrize("seed", range(10))
def test_backward_x_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 5, size=(3, 4, 2))
    p = rng.uniform(1, 10)
    cfg = PoolingConfig.gem(p)
    proj = rng.normal(size=2)
    ana = gem_backward_x(x, cfg, gem_pool(x, cfg), proj)
    num = finite_diff_grad(lambda v: float(_ld_pool(v, p) @ proj), x)
    assert relative_error(ana, num).max() < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_backward_p_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.uniform(0, 5, size=(4, 3, 3))
    proj = rng.normal(size=3)
    p = 2.5 if seed == 0 else rng.uniform(1.5, 10)
    cfg = PoolingConfig.gem(p)
    ana = gem_backward_p(x, cfg, gem_pool(x, cfg), proj)
    num = finite_diff_grad(lambda q: float(_ld_pool(x, q[0]) @ proj), [p])
    assert relative_error(ana, num).max() < 1e-4
    pm = PoolingConfig.gem(p, per_map=3)
    ana_k = gem_backward_p(x, pm, gem_pool(x, pm), proj)
    assert ana_k.sum() == pytest.approx(ana[0], rel=1e-12)


def test_pool_backward_modes():
    x = np.array([[1.0, 3.0], [3.0, 0.5]]).reshape(2, 1, 2)
    g = pool_backward_x(x, PoolingConfig("max"), mac_pool(x), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g.reshape(2, 2), [[0, 2], [1, 0]])
    g = pool_backward_x(x, PoolingConfig("average"), spoc_pool(x), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g.reshape(2, 2), [[0.5, 1], [0.5, 1]])


nonneg = st.lists(st.floats(0, 5), min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(nonneg, st.floats(1, 50), st.floats(1, 50))
def test_sandwich_and_monotonicity(vals, p1, p2):
    x = col(*vals)
    lo, hi = sorted((p1, p2))
    a = gem_pool(x, PoolingConfig.gem(lo))[0]
    b = gem_pool(x, PoolingConfig.gem(hi))[0]
    clamped = np.maximum(x, 1e-6)
    tol = 1e-12 * max(1.0, hi)
    assert spoc_pool(clamped)[0] <= a * (1 + tol)
    assert a <= b * (1 + tol)
    assert b <= mac_pool(clamped)[0] * (1 + tol)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 100), st.floats(1, 10))
def test_scale_equivariance(seed, c, p):
    x = np.random.default_rng(seed).uniform(0.01, 5, size=(3, 3, 4))
    cfg = PoolingConfig.gem(p)
    np.testing.assert_allclose(gem_pool(c * x, cfg), c * gem_pool(x, cfg), rtol=1e-9)


def test_extract_descriptor():
    net = TinyFCN.init(3, (4, 6), seed=0)
    img = np.random.default_rng(0).uniform(size=(16, 14, 3))
    for cfg in (PoolingConfig.gem(3), PoolingConfig("max"), PoolingConfig("average")):
        d = extract_descriptor(net, cfg, img)
        assert np.linalg.norm(d) == pytest.approx(1.0)
        np.testing.assert_array_equal(d, extract_descriptor(net, cfg, img.copy()))
    # ReLU zeros are lifted to the 1e-6 clamp, so the two pathways agree to that level
    np.testing.assert_allclose(extract_descriptor(net, PoolingConfig.gem(1), img),
                               extract_descriptor(net, PoolingConfig("average"), img), atol=1e-6)
    x = np.random.default_rng(3).uniform(1e-6, 5, size=(5, 5, 4))
    np.testing.assert_allclose(gem_pool(x, PoolingConfig.gem(1)), spoc_pool(x), rtol=1e-12)
    np.testing.assert_allclose(pool(np.ones((2, 2, 1)), PoolingConfig("max")), [1])
