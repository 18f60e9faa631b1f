import itertools

import numpy as np
import pytest

from trip.model import (MlpHead, TripModel, dumps_model, first_layer, load_model, loads_model,
                        loss, predict, project, reconstruction_error, save_model)
from trip.stiefel import orthonormalize
from trip.tensor import ShapeError, SparseBatch, SparseTensor, multi_mode_product


def assemble_W(G):
    """Explicit weight tensor ``W[m, j1, ..., jK] = prod_k G_k[j_k, m]``."""
    M = G[0].shape[1]
    W = np.zeros((M,) + tuple(g.shape[0] for g in G))
    for m in range(M):
        for idx in itertools.product(*[range(g.shape[0]) for g in G]):
            W[(m,) + idx] = np.prod([g[j, m] for g, j in zip(G, idx)])
    return W


def random_orthonormal(rng, i, j):
    return np.linalg.qr(rng.normal(size=(i, j)))[0]


@pytest.fixture
def model3(rng):
    return TripModel.init((4, 5, 3), (2, 3, 2), n_classes=3, n_hidden=2, lam=0.1, seed=7)


class TestProject:
    def test_identity_projection(self, rng):
        m = TripModel.init((3, 4), (3, 4), seed=0).with_projection([np.eye(3), np.eye(4)])
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(project(m, x), x, atol=1e-15)

    def test_zero(self, model3):
        np.testing.assert_array_equal(project(model3, np.zeros((4, 5, 3))), 0)

    def test_sparse_matches_dense(self, rng):
        m = TripModel.init((4, 5), (2, 3), seed=1)
        X = rng.normal(size=(6, 4, 5)) * (rng.random((6, 4, 5)) < 0.3)
        dense = project(m, X)
        for n in range(6):
            np.testing.assert_allclose(dense[n], multi_mode_product(X[n], m.C), atol=1e-12)
        np.testing.assert_allclose(project(m, SparseBatch.from_dense(X)), dense, atol=1e-12)
        np.testing.assert_allclose(project(m, SparseTensor.from_dense(X[2])), dense[2],
                                   atol=1e-12)

    def test_shape_mismatch(self, model3):
        with pytest.raises(ShapeError):
            project(model3, np.zeros((4, 5)))


class TestFirstLayer:
    def test_example(self):
        m = TripModel.init((2, 2), (2, 2), task="regression", seed=0)
        m.G[0][:] = [[1], [2]]
        m.G[1][:] = [[3], [4]]
        np.testing.assert_allclose(first_layer(m, np.eye(2)), [11.0])
        W = assemble_W(m.G)
        np.testing.assert_allclose(W[0], [[3, 4], [6, 8]])
        assert np.sum(W[0] * np.eye(2)) == 11

    def test_zero_G(self, model3):
        for g in model3.G:
            g[:] = 0
        np.testing.assert_array_equal(first_layer(model3, np.ones((2, 3, 2))), 0)

    def test_matrix_case(self, rng):
        m = TripModel.init(6, 3, n_hidden=1, seed=2)
        xb = rng.normal(size=3)
        np.testing.assert_allclose(first_layer(m, xb), m.G[0].T @ xb, atol=1e-14)

    @pytest.mark.parametrize("sub", [(2,), (2, 3), (2, 2, 2), (4, 4, 4), (2, 1, 3, 2)])
    def test_against_assembled_weight(self, rng, sub):
        m = TripModel.init(tuple(s + 1 for s in sub), sub, n_hidden=1, rank=3, seed=3)
        Xbar = rng.normal(size=(5,) + sub)
        W = assemble_W(m.G)
        want = np.einsum("mj,nj->nm", W.reshape(3, -1), Xbar.reshape(5, -1))
        np.testing.assert_allclose(first_layer(m, Xbar), want, atol=1e-10)


class TestPredict:
    def test_uniform_when_zeroed(self, model3, rng):
        for g in model3.G:
            g[:] = 0
        for w in model3.head.weights:
            w[:] = 0
        np.testing.assert_allclose(predict(model3, rng.normal(size=(4, 5, 3))), 1 / 3)

    def test_affine_regression(self, rng):
        m = TripModel.init((5, 4), (2, 2), task="regression", rank=2, seed=4)
        x = rng.normal(size=(5, 4))
        r = first_layer(m, project(m, x))
        want = r @ m.head.weights[0][:, 0] + m.head.biases[0][0]
        assert abs(predict(m, x) - want) <= 1e-12

    def test_softmax_sums(self, model3, rng):
        p = predict(model3, 50 * rng.normal(size=(30, 4, 5, 3)))
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)

    def test_rotation_gauge(self, model3, rng):
        X = rng.normal(size=(10, 4, 5, 3))
        Rs = [random_orthonormal(rng, j, j) for j in model3.subspace]
        rot = model3.rotated(Rs)
        np.testing.assert_allclose(predict(rot, X), predict(model3, X), atol=1e-9)
        for C, Cr, R in zip(model3.C, rot.C, Rs):
            np.testing.assert_allclose(Cr, C @ R, atol=1e-14)


class TestLoss:
    def test_perfect_regression(self, rng):
        m = TripModel.init((3, 3), (2, 2), task="regression", lam=0.0, seed=5)
        X = rng.normal(size=(8, 3, 3))
        assert loss(m, X, predict(m, X)).total == pytest.approx(0, abs=1e-20)

    def test_square_projection_no_recon(self, rng):
        m = TripModel.init(5, 5, lam=1.0, seed=6)
        parts = loss(m, rng.normal(size=(7, 5)), rng.integers(0, 2, 7))
        assert abs(parts.recon) <= 1e-12

    def test_shortcut_matches_direct(self, model3, rng):
        X = rng.normal(size=(12, 4, 5, 3))
        parts = loss(model3, X, rng.integers(0, 3, 12))
        direct = reconstruction_error(model3, X)
        shortcut = (X ** 2).sum(axis=(1, 2, 3)) - (project(model3, X) ** 2).sum(axis=(1, 2, 3))
        np.testing.assert_allclose(shortcut, direct, atol=1e-9)
        assert abs(parts.recon - direct.mean()) <= 1e-9

    def test_nonnegative_parts(self, model3, rng):
        parts = loss(model3, rng.normal(size=(9, 4, 5, 3)), rng.integers(0, 3, 9))
        assert parts.pred >= 0 and parts.recon >= 0
        assert parts.total == pytest.approx(parts.pred + model3.lam * parts.recon)

    def test_errors(self, model3):
        with pytest.raises(ValueError, match="empty"):
            loss(model3, np.zeros((0, 4, 5, 3)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError, match="out of range"):
            loss(model3, np.zeros((1, 4, 5, 3)), [3])


class TestModelInit:
    def test_rank_defaults(self):
        assert TripModel.init((4, 4), (2, 2), n_hidden=2).rank == 10
        assert TripModel.init((4, 4), (2, 2), n_hidden=0, n_classes=3).rank == 3
        assert TripModel.init((4, 4), (2, 2), task="regression").rank == 1

    def test_orthonormal(self, model3):
        for C in model3.C:
            assert np.abs(C.T @ C - np.eye(C.shape[1])).max() <= 1e-10

    def test_bad_subspace(self):
        with pytest.raises(ShapeError):
            TripModel.init((3, 3), (4, 2))
        with pytest.raises(ValueError):
            TripModel.init((3, 3), (2, 2), n_hidden=5)

    def test_head_widths(self, model3):
        assert model3.head.widths == [10, 10, 10, 3]
        assert model3.n_params == (4 * 2 + 5 * 3 + 3 * 2) + (2 + 3 + 2) * 10 + model3.head.n_params


class TestModelFile:
    def test_round_trip(self, model3, rng, tmp_path):
        path = tmp_path / "m.trip"
        save_model(model3, path)
        back = load_model(path)
        assert path.read_text().startswith("TRIP1 3 classification\n")
        X = rng.normal(size=(5, 4, 5, 3))
        np.testing.assert_array_equal(predict(back, X), predict(model3, X))
        for a, b in zip(back.Z, model3.Z):
            np.testing.assert_array_equal(a, b)
        assert back.lam == model3.lam
        assert dumps_model(back) == dumps_model(model3)

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            loads_model("NOTTRIP 1 regression\n")

    def test_head_shapes_checked(self):
        rng = np.random.default_rng(0)
        head = MlpHead.init(2, 0, 2, rng)
        with pytest.raises(ShapeError):
            TripModel([orthonormalize(rng.normal(size=(3, 2)))], [np.zeros((2, 3))], head,
                      "classification", 2, 0.0)
