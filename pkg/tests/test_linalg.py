import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from scmil.exceptions import ConvergenceError
from scmil.linalg import (axpy, dot, gemm, gemv, overcomplete_dct, relu, sigmoid, soft_threshold,
                          softplus, softplus_grad, spectral_norm, tanh)

from conftest import jacobi_singular_values, naive_matvec

finite = st.floats(-1e3, 1e3, allow_nan=False)


class TestSoftThreshold:
    def test_examples(self):
        np.testing.assert_array_equal(soft_threshold([2.0, -0.5, -3.0], 1.0), [1.0, 0.0, -2.0])
        np.testing.assert_array_equal(soft_threshold([0.3, -0.7], 10), [0.0, 0.0])

    def test_zero_lambda_is_identity(self, rng):
        v = rng.standard_normal(20)
        np.testing.assert_array_equal(soft_threshold(v, 0.0), v)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold([1.0], -0.1)

    def test_per_row_thresholds_broadcast(self):
        out = soft_threshold(np.array([[1.0, -2.0], [1.0, -2.0]]), np.array([[0.5], [1.5]]))
        np.testing.assert_array_equal(out, [[0.5, -1.5], [0.0, -0.5]])

    @given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite),
           st.floats(0, 100))
    def test_non_expansive(self, u, v, lam):
        d_out = np.linalg.norm(soft_threshold(u, lam) - soft_threshold(v, lam))
        assert d_out <= np.linalg.norm(u - v) * (1 + 1e-12) + 1e-12

    @given(arrays(np.float64, 12, elements=finite), st.floats(0, 100))
    def test_prox_optimality(self, v, lam):
        # 0 in (a - v) + lam * subdiff|a| for every coordinate
        a = soft_threshold(v, lam)
        for aj, vj in zip(a, v):
            if aj != 0:
                assert abs((aj - vj) + lam * np.sign(aj)) <= 1e-9 * max(1.0, abs(vj))
            else:
                assert abs(vj) <= lam + 1e-12

    @given(arrays(np.float64, 8, elements=finite), st.floats(0, 10), st.floats(0, 10))
    def test_larger_threshold_is_sparser(self, v, lam1, lam2):
        lo, hi = sorted((lam1, lam2))
        assert np.all(np.abs(soft_threshold(v, hi)) <= np.abs(soft_threshold(v, lo)))


class TestSpectralNorm:
    def test_identity_and_diagonal(self):
        assert spectral_norm(np.eye(2)) == pytest.approx(1.0, abs=1e-12)
        assert spectral_norm(np.diag([2.0, 1.0])) == pytest.approx(2.0, rel=1e-10)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 4))) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_jacobi_svd(self, seed):
        m = np.random.default_rng(seed).standard_normal((8, 16))
        assert spectral_norm(m) == pytest.approx(jacobi_singular_values(m)[0], abs=1e-8)

    def test_jacobi_oracle_sanity(self, rng):
        m = rng.standard_normal((5, 7))
        np.testing.assert_allclose(jacobi_singular_values(m), np.linalg.svd(m, compute_uv=False), rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_lower_bound_witness(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((6, 9))
        s = spectral_norm(m)
        for _ in range(50):
            v = rng.standard_normal(9)
            assert s >= np.linalg.norm(m @ v) / np.linalg.norm(v) - 1e-12

    def test_non_convergence_carries_iterate(self):
        m = np.diag([1.0, 0.999999, 0.5])
        with pytest.raises(ConvergenceError) as info:
            spectral_norm(m, tol=1e-14, max_iter=3)
        assert info.value.last_iterate.shape == (3,)

    def test_bad_tol(self):
        with pytest.raises(ValueError):
            spectral_norm(np.eye(2), tol=0.0)


class TestDct:
    def test_square_first_column(self):
        d = overcomplete_dct(4, 4)
        np.testing.assert_allclose(d[:, 0], 0.5, atol=1e-15)

    def test_unit_norm_columns(self):
        d = overcomplete_dct(16, 64)
        np.testing.assert_allclose(np.linalg.norm(d, axis=0), 1.0, atol=1e-12)

    def test_centred_columns(self):
        d = overcomplete_dct(8, 16)
        np.testing.assert_allclose(d[:, 1:].sum(axis=0), 0.0, atol=1e-12)

    def test_square_is_orthonormal(self):
        d = overcomplete_dct(32, 32)
        np.testing.assert_allclose(d.T @ d, np.eye(32), atol=1e-12)

    def test_under_complete_rejected(self):
        with pytest.raises(ValueError):
            overcomplete_dct(8, 4)


class TestActivations:
    def test_softplus_values(self):
        assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)
        assert softplus(100.0) == pytest.approx(100.0, abs=1e-12)
        assert softplus(-40.0) == pytest.approx(math.exp(-40.0), rel=1e-12)
        assert np.isfinite(softplus(np.array([1e4, -1e4]))).all()

    @pytest.mark.parametrize("x", [-2.0, 0.0, 3.0])
    def test_softplus_grad_fd(self, x):
        h = 1e-5
        fd = (softplus(x + h) - softplus(x - h)) / (2 * h)
        assert abs(softplus_grad(x) - fd) / abs(fd) < 1e-8
        assert softplus_grad(x) == pytest.approx(sigmoid(x), abs=0)

    def test_other_kernels(self):
        assert sigmoid(0.0) == 0.5
        assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0
        assert tanh(0.0) == 0.0
        np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])


class TestDense:
    def test_identity(self, rng):
        v = rng.standard_normal(5)
        np.testing.assert_array_equal(gemv(np.eye(5), v), v)

    def test_gemm_integers(self):
        np.testing.assert_array_equal(gemm([[1, 2], [3, 4]], [[5, 6], [7, 8]]), [[19, 22], [43, 50]])

    def test_gemv_naive_oracle(self, rng):
        a = rng.standard_normal((7, 13))
        x = rng.standard_normal(13)
        np.testing.assert_allclose(gemv(a, x), naive_matvec(a.tolist(), x.tolist()), atol=1e-12)

    def test_axpy_dot(self):
        np.testing.assert_array_equal(axpy(2.0, [1.0, 2.0], [1.0, 1.0]), [3.0, 5.0])
        assert dot([1.0, 2.0], [3.0, 4.0]) == 11.0

    @pytest.mark.parametrize("call", [
        lambda: gemm(np.ones((2, 3)), np.ones((2, 3))),
        lambda: gemv(np.ones((2, 3)), np.ones(2)),
        lambda: axpy(1.0, np.ones(2), np.ones(3)),
        lambda: dot(np.ones(2), np.ones(3)),
    ])
    def test_shape_mismatch(self, call):
        with pytest.raises(ValueError):
            call()

    def test_repeatable(self, rng):
        a, b = rng.standard_normal((30, 40)), rng.standard_normal((40, 20))
        assert gemm(a, b).tobytes() == gemm(a, b).tobytes()
