import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import central_diff
from trip.data import gen_spiral, normalize, pca_baseline
from trip.metrics import accuracy
from trip.model import (TripModel, head_output, loss, predict, prediction_loss, project,
                        reconstruction_error)
from trip.stiefel import orthonormalize
from trip.tensor import SparseBatch
from trip.training import (TrainConfig, TrainingError, grad_C, grad_G, gradients,
                           head_backprop, train)


def principal_angle(A, B):
    s = np.linalg.svd(A.T @ B, compute_uv=False)
    return float(np.degrees(np.arccos(np.clip(s.min(), -1.0, 1.0))))


def small_problem(rng, shape, sub, task="classification", n_hidden=1, lam=0.3, n=7, seed=0):
    m = TripModel.init(shape, sub, task, 3, n_hidden, lam=lam, seed=seed)
    X = rng.normal(size=(n,) + shape)
    y = rng.integers(0, 3, n) if task == "classification" else rng.normal(size=n)
    return m, X, y


def with_Z(model, k, Z):
    m = model.copy()
    m.factors[k] = orthonormalize(Z)
    return m


def with_C(model, k, C):
    """Model whose k-th projection is the raw (not necessarily orthonormal) ``C``."""
    m = model.copy()
    f = m.factors[k]
    m.factors[k] = type(f)(f.Z, f.svd, C)
    return m


def direct_loss(model, X, y):
    """Objective with the reconstruction term expanded, valid for any ``C``."""
    out = head_output(model, project(model, X))
    out = out[:, None] if model.task == "regression" else out
    pred, _ = prediction_loss(model, out, y)
    return float(np.mean(pred + model.lam * reconstruction_error(model, X)))


CASES = [((5,), (2,), "classification", 0), ((5,), (3,), "regression", 2),
         ((4, 3), (2, 2), "classification", 2), ((6, 4), (3, 1), "regression", 0)]


class TestHeadBackprop:
    def test_closed_form_zero_hidden(self, rng):
        m, X, y = small_problem(rng, (4,), (2,), "regression", 0, lam=0.0)
        _, _, dr, _ = head_backprop(m, X, y)
        resid = predict(m, X) - y
        want = (2 / len(y)) * resid[:, None] * m.head.weights[0][:, 0][None, :]
        np.testing.assert_allclose(dr, want, atol=1e-14)

    def test_perfect_fit_zero_grads(self, rng):
        m, X, _ = small_problem(rng, (4,), (2,), "regression", 2, lam=0.0)
        dW, db, dr, _ = head_backprop(m, X, predict(m, X))
        for g in dW + db + [dr]:
            np.testing.assert_allclose(g, 0, atol=1e-14)

    @pytest.mark.parametrize("task", ["classification", "regression"])
    def test_finite_difference(self, rng, task):
        m, X, y = small_problem(rng, (5,), (3,), task, 2, lam=0.0)
        dW, db, _, _ = head_backprop(m, X, y)
        for params, grads in [(m.head.weights, dW), (m.head.biases, db)]:
            for p, g in zip(params, grads):
                D = rng.normal(size=p.shape)

                def f(v, p=p):
                    old = p.copy()
                    p[...] = v
                    out = loss(m, X, y).total
                    p[...] = old
                    return out

                fd = central_diff(f, p.copy(), D)
                assert abs(np.sum(g * D) - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_dr_finite_difference(self, rng):
        m, X, y = small_problem(rng, (5,), (3,), "classification", 1, lam=0.0)
        Xbar = project(m, X)
        _, _, dr, _ = head_backprop(m, X, y)

        def f(r):
            out, _ = m.head.forward(r)
            return float(prediction_loss(m, out, y)[0].mean())

        r0 = Xbar @ m.G[0]
        D = rng.normal(size=r0.shape)
        fd = central_diff(f, r0, D)
        assert abs(np.sum(dr * D) - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_non_finite_raises(self, rng):
        m, X, y = small_problem(rng, (4,), (2,), "regression", 0)
        m.head.weights[0][:] = np.inf
        with pytest.raises(TrainingError, match="non-finite"):
            head_backprop(m, X, y)


class TestGradC:
    def test_zero(self, rng):
        m, X, _ = small_problem(rng, (4, 3), (2, 2), lam=0.0)
        for g in grad_C(m, X, np.zeros((len(X), m.rank))):
            np.testing.assert_array_equal(g, 0)

    @pytest.mark.parametrize("shape,sub", [((6,), (2,)), ((4, 3), (2, 2))])
    def test_reconstruction_only(self, rng, shape, sub):
        m, X, _ = small_problem(rng, shape, sub, lam=0.7)
        grads = grad_C(m, X, np.zeros((len(X), m.rank)))
        for k, C in enumerate(m.C):
            D = rng.normal(size=C.shape)
            fd = central_diff(
                lambda c: -m.lam * np.mean(np.sum(project(with_C(m, k, c), X) ** 2,
                                                  axis=tuple(range(1, len(sub) + 1)))), C, D)
            assert abs(np.sum(grads[k] * D) - fd) <= 1e-5 * max(1.0, abs(fd))

    @pytest.mark.parametrize("shape,sub,task,hidden", CASES)
    def test_full_loss(self, rng, shape, sub, task, hidden):
        m, X, y = small_problem(rng, shape, sub, task, hidden)
        g = gradients(m, X, y)
        for k, C in enumerate(m.C):
            D = rng.normal(size=C.shape)

            def f(c, k=k):
                # shortcut objective: its gradient is what training follows
                return loss(with_C(m, k, c), X, y).total

            fd = central_diff(f, C, D)
            assert abs(np.sum(g.dC[k] * D) - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_sparse_matches_dense(self, rng):
        m, X, y = small_problem(rng, (5, 4), (2, 3))
        X = X * (rng.random(X.shape) < 0.4)
        dense = gradients(m, X, y)
        sparse = gradients(m, SparseBatch.from_dense(X), y)
        for a, b in zip(dense.dC + dense.dG + dense.dZ, sparse.dC + sparse.dG + sparse.dZ):
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestGradG:
    def test_zero(self, rng):
        m, X, _ = small_problem(rng, (4, 3), (2, 2))
        for g in grad_G(m, project(m, X), np.zeros((len(X), m.rank))):
            np.testing.assert_array_equal(g, 0)

    def test_matrix_case(self, rng):
        m, X, _ = small_problem(rng, (5,), (3,), n_hidden=1)
        Xbar = project(m, X)
        dr = rng.normal(size=(len(X), m.rank))
        np.testing.assert_allclose(grad_G(m, Xbar, dr)[0], Xbar.T @ dr, atol=1e-14)

    @pytest.mark.parametrize("shape,sub,task,hidden", CASES)
    def test_finite_difference(self, rng, shape, sub, task, hidden):
        m, X, y = small_problem(rng, shape, sub, task, hidden)
        g = gradients(m, X, y)
        for k, G in enumerate(m.G):
            D = rng.normal(size=G.shape)

            def f(v, G=G):
                old = G.copy()
                G[...] = v
                out = loss(m, X, y).total
                G[...] = old
                return out

            fd = central_diff(f, G.copy(), D)
            assert abs(np.sum(g.dG[k] * D) - fd) <= 1e-5 * max(1.0, abs(fd))


class TestEndToEnd:
    @pytest.mark.parametrize("shape,sub,task,hidden", CASES)
    def test_latent_gradient(self, rng, shape, sub, task, hidden):
        m, X, y = small_problem(rng, shape, sub, task, hidden)
        g = gradients(m, X, y)
        for k, Z in enumerate(m.Z):
            D = rng.normal(size=Z.shape)
            # the expanded reconstruction error keeps the check independent
            # of the shortcut identity
            fd = central_diff(lambda z: direct_loss(with_Z(m, k, z), X, y), Z, D)
            assert abs(np.sum(g.dZ[k] * D) - fd) <= 1e-4 * max(1.0, abs(fd))

    def test_per_sample_loss(self, rng):
        m, X, y = small_problem(rng, (4, 3), (2, 2))
        np.testing.assert_allclose(gradients(m, X, y).per_sample_loss,
                                   loss(m, X, y).per_sample, atol=1e-12)


def toy(rng, n=60, dim=6, task="classification"):
    X = rng.normal(size=(n, dim))
    w = rng.normal(size=dim)
    s = X @ w
    y = (s > 0).astype(int) if task == "classification" else s + 0.1 * rng.normal(size=n)
    return X, y


class TestTrain:
    def test_log_and_orthonormality(self, rng):
        X, y = toy(rng)
        m = TripModel.init(6, 2, n_hidden=1, lam=0.1, seed=0)
        out, log = train(m, X, y, TrainConfig(epochs=5, batch_size=16))
        assert len(log) == 5 and list(log.column("epoch")) == [1, 2, 3, 4, 5]
        assert log.column("ortho_err").max() <= 1e-8
        assert np.all(np.isfinite(log.column("mean_loss")))
        # the input model is left untouched
        np.testing.assert_array_equal(m.Z[0], TripModel.init(6, 2, n_hidden=1, seed=0).Z[0])
        assert not np.array_equal(out.Z[0], m.Z[0])

    def test_deterministic(self, rng, tmp_path):
        X, y = toy(rng)
        m = TripModel.init(6, 2, n_hidden=2, lam=0.1, seed=3)
        cfg = TrainConfig(epochs=4, batch_size=7, seed=11)
        (a, la), (b, lb) = train(m, X, y, cfg), train(m, X, y, cfg)
        for col in ("mean_loss", "pred_loss", "recon_loss", "fit_metric", "ortho_err"):
            np.testing.assert_array_equal(la.column(col), lb.column(col))
        for za, zb in zip(a.Z + a.G + a.head.weights, b.Z + b.G + b.head.weights):
            np.testing.assert_array_equal(za, zb)
        la.write_csv(tmp_path / "log.csv")
        header = (tmp_path / "log.csv").read_text().splitlines()[0]
        assert header == "epoch,mean_loss,pred_loss,recon_loss,fit_metric,wall_ms"

    def test_zero_epochs(self, rng):
        X, y = toy(rng)
        m = TripModel.init(6, 2, seed=0)
        out, log = train(m, X, y, TrainConfig(epochs=0))
        assert len(log) == 0
        np.testing.assert_array_equal(out.C[0], m.C[0])

    def test_descent_small_step(self, rng):
        passes = 0
        for seed in range(10):
            X, y = toy(np.random.default_rng(seed), n=20)
            m = TripModel.init(6, 2, n_hidden=1, lam=0.1, seed=seed)
            before = loss(m, X, y).total
            out, _ = train(m, X, y, TrainConfig(epochs=1, batch_size=20, learning_rate=1e-5,
                                                 seed=seed))
            passes += loss(out, X, y).total <= before
        assert passes >= 8

    def test_epoch_cadence(self, rng):
        X, y = toy(rng)
        m = TripModel.init(6, 2, n_hidden=1, lam=0.1, seed=0)
        out, log = train(m, X, y, TrainConfig(epochs=30, batch_size=16, learning_rate=1e-2,
                                              orthonormalize_every="epoch"))
        assert log.column("ortho_err").max() <= 1e-8
        assert log[-1].mean_loss < log[0].mean_loss

    def test_full_batch_epoch_equals_batch(self, rng):
        # with a single batch both cadences take the same step
        X, y = toy(rng, n=16)
        m = TripModel.init(6, 2, n_hidden=1, lam=0.1, seed=0)
        a, _ = train(m, X, y, TrainConfig(epochs=3, batch_size=16, shuffle=False))
        b, _ = train(m, X, y, TrainConfig(epochs=3, batch_size=16, shuffle=False,
                                          orthonormalize_every="epoch"))
        np.testing.assert_allclose(a.C[0], b.C[0], atol=1e-12)

    def test_frozen_projection(self, rng):
        X, y = toy(rng)
        m = TripModel.init(6, 2, n_hidden=1, seed=0)
        out, _ = train(m, X, y, TrainConfig(epochs=3, train_projection=False))
        np.testing.assert_array_equal(out.C[0], m.C[0])

    def test_non_finite_aborts(self, rng):
        X, y = toy(rng, task="regression")
        X[5, 2] = np.nan
        m = TripModel.init(6, 2, task="regression", seed=0)
        with pytest.raises(TrainingError, match="epoch 1, batch"):
            train(m, X, y, TrainConfig(epochs=2, batch_size=8))

    def test_config_validation(self):
        for bad in [dict(batch_size=0), dict(learning_rate=0), dict(epochs=-1),
                    dict(orthonormalize_every="never")]:
            with pytest.raises(ValueError):
                TrainConfig(**bad)

    def test_mismatched_responses(self, rng):
        X, y = toy(rng)
        with pytest.raises(ValueError, match="responses"):
            train(TripModel.init(6, 2), X, y[:-1], TrainConfig(epochs=1))


@pytest.mark.slow
def test_large_lambda_recovers_pca():
    tr, _ = gen_spiral(seed=1)
    tr = normalize(tr)
    m = TripModel.init(tr.shape, (2,), n_hidden=3, lam=10.0, seed=1)
    out, _ = train(m, tr.X, tr.y, TrainConfig(epochs=300, batch_size=20, learning_rate=1e-2,
                                              seed=1))
    assert principal_angle(out.C[0], pca_baseline(tr, 2)) <= 5.0


def test_square_projection_matches_logistic_regression(rng):
    X, y = toy(rng, n=200, dim=5)
    X = X + 0.8 * rng.normal(size=X.shape)
    m = TripModel.init(5, 5, n_hidden=0, lam=0.0, seed=0)
    out, _ = train(m, X, y, TrainConfig(epochs=300, batch_size=32, learning_rate=1e-2))
    acc = accuracy(predict(out, X), y)

    def nll(p):
        z = X @ p[:5] + p[5]
        return np.mean(np.logaddexp(0, z) - y * z)

    p = minimize(nll, np.zeros(6), method="BFGS").x
    ref = accuracy(np.column_stack([-(X @ p[:5] + p[5]), X @ p[:5] + p[5]]), y)
    assert abs(acc - ref) <= 0.02
