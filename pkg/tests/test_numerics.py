import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gemret.numerics import (ConvergenceError, finite_diff_grad, inner_product, inv_sqrt_psd,
                             l2_normalize, sym_eig)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8])
    np.testing.assert_array_equal(l2_normalize([1, 0, 0]), [1, 0, 0])
    np.testing.assert_array_equal(l2_normalize([0, 0]), [0, 0])
    np.testing.assert_array_equal(l2_normalize([1e-13, 0]), [0, 0])


def test_inner_product_examples():
    assert inner_product([1, 0], [0, 1]) == 0
    assert inner_product([0.6, 0.8], [0.6, 0.8]) == pytest.approx(1.0)
    assert inner_product([0.6, 0.8], [0.8, 0.6]) == pytest.approx(0.96)
    with pytest.raises(ValueError):
        inner_product([1, 0], [1, 0, 0])


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)))
def test_self_similarity_of_normalized_is_one(a):
    if np.linalg.norm(a) < 1e-6:
        return
    v = l2_normalize(a)
    assert inner_product(v, v) == pytest.approx(1.0, abs=1e-9)


def test_sym_eig_examples():
    vals, vecs = sym_eig(np.diag([2.0, 1.0]))
    np.testing.assert_allclose(vals, [2, 1])
    np.testing.assert_allclose(vecs, np.eye(2))
    vals, vecs = sym_eig([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(vals, [1, -1], atol=1e-12)
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(np.abs(vecs), [[s, s], [s, s]], atol=1e-12)
    vals, _ = sym_eig(np.eye(5))
    np.testing.assert_allclose(vals, np.ones(5))


def test_sym_eig_rejects_non_square():
    with pytest.raises(ValueError):
        sym_eig(np.zeros((2, 3)))


def test_sym_eig_reports_non_convergence():
    a = np.random.default_rng(0).normal(size=(6, 6))
    with pytest.raises(ConvergenceError, match="residual"):
        sym_eig(a + a.T, max_sweeps=1)


@pytest.mark.parametrize("n", [1, 2, 3, 7, 16, 33, 64])
def test_sym_eig_reconstruction_and_orthonormality(n):
    rng = np.random.default_rng(n)
    a = rng.normal(size=(n, n))
    a = a + a.T
    vals, vecs = sym_eig(a)
    assert np.all(np.diff(vals) <= 0)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-8)
    recon = (vecs * vals) @ vecs.T
    assert np.abs(recon - a).max() < 1e-8 * (1 + np.abs(a).max())
    for lam, v in zip(vals, vecs.T):
        assert np.linalg.norm(a @ v - lam * v) < 1e-8 * (1 + abs(lam))
    # independent check against LAPACK eigenvalues
    np.testing.assert_allclose(vals, np.sort(np.linalg.eigvalsh(a))[::-1], atol=1e-9)


def test_inv_sqrt_psd_examples():
    np.testing.assert_allclose(inv_sqrt_psd(np.diag([4.0, 1.0]), 1e-12), np.diag([0.5, 1.0]))
    np.testing.assert_allclose(inv_sqrt_psd(np.eye(3), 0.5), np.eye(3))
    np.testing.assert_allclose(inv_sqrt_psd(np.diag([1.0, 0.0]), 1e-4), np.diag([1.0, 100.0]))


def test_inv_sqrt_psd_whitens():
    rng = np.random.default_rng(3)
    b = rng.normal(size=(10, 10))
    a = b @ b.T + 0.1 * np.eye(10)
    w = inv_sqrt_psd(a)
    np.testing.assert_allclose(w @ a @ w, np.eye(10), atol=1e-6)


def test_finite_diff_grad_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda x: x[0] ** 2, [3.0], 1e-5), [6.0], atol=1e-6)
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 4.2, [1.0, 2.0, 3.0]), [0, 0, 0])
    np.testing.assert_allclose(finite_diff_grad(lambda x: x[0] * x[1], [2.0, 5.0]), [5, 2],
                               atol=1e-8)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, [1.0], 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 31))
def test_sym_eig_property(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n)) * rng.uniform(0.01, 100)
    a = a + a.T
    vals, vecs = sym_eig(a)
    recon = (vecs * vals) @ vecs.T
    assert np.abs(recon - a).max() < 1e-8 * (1 + np.abs(a).max())
