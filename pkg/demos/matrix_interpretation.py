"""Interpret a model trained on matrix-valued samples.

Each sample is a 12 x 8 matrix. The label depends only on the bilinear form
``a^T X b`` for two fixed unit vectors, so a good model should find ``a`` on
mode 0 and ``b`` on mode 1. The global rank-1 surrogate and the local
coefficients at a few anchors are mapped back to the input modes and compared
with the planted directions.

Run with ``python3 demos/matrix_interpretation.py``.
"""
import numpy as np

from trip import (Dataset, ModelSpec, TrainConfig, accuracy, export_decision_grid, fit_model,
                  fit_surrogate, lrc, predict, project, rotation)


def planted(seed=0, n=400, shape=(12, 8)):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape[0])
    b = rng.standard_normal(shape[1])
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    X = rng.standard_normal((n,) + shape)
    score = np.einsum("nij,i,j->n", X, a, b)
    return Dataset(X, (score > 0).astype(int)), a, b


def cosine(u, v):
    return abs(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))


def main(seed=0):
    ds, a, b = planted(seed)
    train, test = ds.subset(np.arange(300)), ds.subset(np.arange(300, 400))
    spec = ModelSpec(subspace=(2, 2), n_hidden=1, lam=1e-3,
                     train=TrainConfig(epochs=300, batch_size=32, learning_rate=1e-2))
    model, _ = fit_model(spec, train, seed)
    print(f"test accuracy {accuracy(predict(model, test.X), test.y):.3f}")

    glob = fit_surrogate(model, train.X)
    rs = rotation(model, train.X, glob)
    print(f"global surrogate residual {glob.residual:.4f}")
    for k, true in enumerate((a, b)):
        direction = model.C[k] @ glob.g[k]
        print(f"mode {k}: |cos| to planted direction {cosine(direction, true):.3f}")

    for anchor in (0, 1, 2):
        res = lrc(model, train.X, anchor, sigma=2.0, surrogate=glob, rotations=rs)
        cos = [cosine(v, t) for v, t in zip(res.original, (a, b))]
        print(f"anchor {anchor}: local |cos| per mode {cos[0]:.3f} {cos[1]:.3f}")

    # decision surface over the first rotated coordinate of each mode
    xr = project(model, train.X)
    lim = float(np.abs(xr).max())
    grid = export_decision_grid(model, ((0, 0), (1, 0)), [(-lim, lim), (-lim, lim)], 5,
                                rotations=rs)
    print("P(class 1) on a 5 x 5 grid (rows: mode-0 coordinate)")
    print(np.array2string(grid[:, -1].reshape(5, 5), precision=2, suppress_small=True))


if __name__ == "__main__":
    main()
