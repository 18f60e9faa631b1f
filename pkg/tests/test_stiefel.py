import logging

import numpy as np
import pytest

from conftest import central_diff
from trip.stiefel import (RankDeficientError, manifold_grad, orthonormalize, random_latent,
                          thin_svd)


def check_svd(m, f, tol=1e-9):
    J = m.shape[1]
    assert np.abs(f.P.T @ f.P - np.eye(J)).max() <= 1e-10
    assert np.abs(f.Q.T @ f.Q - np.eye(J)).max() <= 1e-10
    assert np.all(np.diff(f.S) <= 0) and np.all(f.S >= 0)
    assert np.abs(f.reconstruct() - m).max() <= tol


class TestThinSvd:
    def test_orthogonal_columns(self):
        f = thin_svd(np.array([[2.0, 0], [0, 3], [0, 0]]))
        np.testing.assert_allclose(f.S, [3, 2], atol=1e-14)

    def test_orthonormal_input(self, rng):
        W = np.linalg.qr(rng.normal(size=(6, 3)))[0]
        np.testing.assert_allclose(thin_svd(W).S, 1.0, atol=1e-12)

    @pytest.mark.parametrize("shape", [(5, 3), (1, 1), (4, 4), (200, 6), (7, 1)])
    def test_reconstruction_and_lapack(self, rng, shape):
        m = rng.normal(size=shape)
        f = thin_svd(m)
        check_svd(m, f)
        np.testing.assert_allclose(f.S, np.linalg.svd(m, compute_uv=False), rtol=1e-10)

    def test_sign_convention(self, rng):
        f = thin_svd(rng.normal(size=(8, 4)))
        for q in f.Q.T:
            assert q[np.argmax(np.abs(q))] > 0

    def test_deterministic(self, rng):
        m = rng.normal(size=(9, 3))
        a, b = thin_svd(m), thin_svd(m.copy())
        for x, y in [(a.P, b.P), (a.S, b.S), (a.Q, b.Q)]:
            np.testing.assert_array_equal(x, y)

    def test_rank_deficient_and_zero(self, rng):
        u = rng.normal(size=(6, 1))
        m = np.hstack([u, 2 * u, rng.normal(size=(6, 1))])
        check_svd(m, thin_svd(m))
        f = thin_svd(np.zeros((4, 2)))
        check_svd(np.zeros((4, 2)), f)
        np.testing.assert_array_equal(f.S, 0)

    def test_wide_rejected(self):
        with pytest.raises(ValueError, match="rows >= cols"):
            thin_svd(np.zeros((2, 3)))


class TestOrthonormalize:
    def test_orthogonal_columns_example(self):
        f = orthonormalize(np.array([[2.0, 0], [0, 3], [0, 0]]))
        np.testing.assert_allclose(f.C, [[1, 0], [0, 1], [0, 0]], atol=1e-12)

    def test_fixed_point_and_scale(self, rng):
        W = np.linalg.qr(rng.normal(size=(7, 3)))[0]
        np.testing.assert_allclose(orthonormalize(W).C, W, atol=1e-10)
        np.testing.assert_allclose(orthonormalize(4.5 * W).C, W, atol=1e-10)

    def test_polar_factor(self, rng):
        Z = rng.normal(size=(10, 4))
        C = orthonormalize(Z).C
        assert np.abs(C.T @ C - np.eye(4)).max() <= 1e-10
        U, _, Vt = np.linalg.svd(Z, full_matrices=False)
        np.testing.assert_allclose(C, U @ Vt, atol=1e-10)
        # nearest orthonormal matrix: no random orthonormal matrix is closer
        for _ in range(20):
            V = np.linalg.qr(rng.normal(size=(10, 4)))[0]
            assert np.linalg.norm(Z - C) <= np.linalg.norm(Z - V) + 1e-12

    def test_jitter_on_rank_deficiency(self, rng, caplog):
        u = rng.normal(size=(5, 1))
        Z = np.hstack([u, u])
        with caplog.at_level(logging.WARNING):
            f = orthonormalize(Z, np.random.default_rng(0))
        assert "jitter" in caplog.text
        assert np.abs(f.C.T @ f.C - np.eye(2)).max() <= 1e-8
        assert np.abs(f.Z - Z).max() < 1e-4

    def test_zero_matrix_jitters(self):
        f = orthonormalize(np.zeros((3, 2)), np.random.default_rng(1))
        assert np.abs(f.C.T @ f.C - np.eye(2)).max() <= 1e-8

    def test_random_latent_scale(self, rng):
        Z = random_latent((4000, 3), rng)
        assert abs(Z.std() - 1 / np.sqrt(4000)) < 1e-3


class TestManifoldGrad:
    def test_identity_example(self):
        f = orthonormalize(np.eye(2))
        out = manifold_grad(np.array([[0.0, 1], [0, 0]]), f)
        np.testing.assert_allclose(out, [[0, 0.5], [-0.5, 0]], atol=1e-14)

    def test_zero_gradient(self, rng):
        f = orthonormalize(rng.normal(size=(5, 2)))
        np.testing.assert_array_equal(manifold_grad(np.zeros((5, 2)), f), 0)

    @pytest.mark.parametrize("shape", [(5, 2), (3, 3), (8, 1), (6, 4)])
    def test_finite_difference(self, rng, shape):
        for _ in range(5):
            Z, A, D = (rng.normal(size=shape) for _ in range(3))
            g = manifold_grad(A, orthonormalize(Z))
            fd = central_diff(lambda z: np.sum(A * orthonormalize(z).C), Z, D)
            assert abs(np.sum(g * D) - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_tangent_part_skew(self, rng):
        Z, A = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        f = orthonormalize(Z)
        g = manifold_grad(A, f)
        M = f.svd.P.T @ g @ f.svd.Q
        # P' f Q is (P'AQ - Q'A'P) / (s_i + s_j): skew after scaling by s_i + s_j
        S = f.svd.S
        K = M * (S[:, None] + S[None, :])
        assert np.abs(K + K.T).max() <= 1e-10

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            manifold_grad(np.zeros((4, 2)), orthonormalize(rng.normal(size=(5, 2))))

    def test_rank_error_type(self):
        assert issubclass(RankDeficientError, ValueError)
