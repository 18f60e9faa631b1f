"""Recover the two informative directions of the hidden spiral.

Trains a supervised projection onto a 2-dimensional subspace at a small and a
large reconstruction weight and compares each learned subspace with the true
spiral plane and with the leading PCA directions.

Run with ``python3 demos/spiral_subspace.py``.
"""
import numpy as np

from trip import ModelSpec, TrainConfig, accuracy, fit_model, gen_spiral, normalize, predict
from trip import pca_baseline


def principal_angle(A, B):
    """Largest principal angle in degrees between the column spans of A and B."""
    qa, qb = np.linalg.qr(A)[0], np.linalg.qr(B)[0]
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.degrees(np.arccos(np.clip(s.min(), -1, 1)))


def main(seed=0, epochs=1000):
    train, test = gen_spiral(seed)
    train = normalize(train)
    test = normalize(test, train.norm)
    # spiral plane in the normalized coordinates
    plane = train.meta["rotation"][:, :2] / train.norm.std[:, None]
    pca = pca_baseline(train, 2)
    print(f"PCA subspace vs spiral plane: {principal_angle(pca, plane):6.2f} deg")
    for lam in (1e-2, 1.0):
        spec = ModelSpec(subspace=(2,), n_hidden=2, lam=lam,
                         train=TrainConfig(epochs=epochs, batch_size=20, learning_rate=1e-2))
        model, _ = fit_model(spec, train, seed)
        C = model.C[0]
        acc = accuracy(predict(model, test.X), test.y)
        print(f"lambda={lam:<6g} test accuracy {acc:.3f}  "
              f"angle to plane {principal_angle(C, plane):6.2f} deg  "
              f"angle to PCA {principal_angle(C, pca):6.2f} deg")


if __name__ == "__main__":
    main()
