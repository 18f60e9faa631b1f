"""Mini-batch Adam training of latent projections, low-rank factors and the head.

Per batch: project, run the head forward and backward to get ``dE/dr``,
form ``dE/dC`` and ``dE/dG`` from it, pull ``dE/dC`` back to the latent
matrices, take an Adam step and re-orthonormalize.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .metrics import accuracy, rmse
from .model import (CHUNK, TripModel, as_batch, loss, lowrank_contract,
                    lowrank_expand, predict, prediction_loss, project_factors, sqnorms)
from .stiefel import manifold_grad, orthonormalize
from .tensor import SparseBatch

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "mean_loss", "pred_loss", "recon_loss", "fit_metric", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True
    # "batch": update and re-orthonormalize per mini-batch; "epoch": one
    # full-gradient update per epoch
    orthonormalize_every: str = "batch"
    clip_norm: Optional[float] = None
    train_projection: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.orthonormalize_every not in ("batch", "epoch"):
            raise ValueError("orthonormalize_every must be 'batch' or 'epoch'")


@dataclass
class GradientSet:
    dZ: list
    dC: list
    dG: list
    dW: list
    db: list
    dr: np.ndarray
    per_sample_loss: np.ndarray
    Xbar: np.ndarray = field(repr=False)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    pred_loss: float
    recon_loss: float
    fit_metric: float
    wall_ms: float
    ortho_err: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                d = asdict(r)
                w.writerow([d["epoch"]] + [format(d[c], ".17g") for c in LOG_COLUMNS[1:]])


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit_metric(model: TripModel, X, y, output=None) -> float:
    """Accuracy for classification, RMSE for regression.

    ``output`` may carry raw head outputs already computed for ``X``.
    """
    if output is None:
        out = predict(model, X)
    else:
        out = output[:, 0] if model.task == "regression" else output
    return accuracy(out, y) if model.task == "classification" else rmse(out, y)


# ---------------------------------------------------------------- gradients

def head_backprop(model: TripModel, X, y, Xbar=None):
    """Gradients of the batch-mean prediction loss.

    Returns ``(dW, db, dr, per_sample_loss)`` where ``dr[n]`` is the gradient
    with respect to the first-layer output of sample ``n``.
    """
    batch, _ = as_batch(X, model.input_shape)
    if len(batch) == 0:
        raise ValueError("empty batch")
    if Xbar is None:
        Xbar = project_factors(model.C, batch)
    r = lowrank_contract(Xbar, model.G)
    out, cache = model.head.forward(r)
    per, dout = prediction_loss(model, out, np.atleast_1d(y))
    if not np.all(np.isfinite(per)):
        raise TrainingError("non-finite prediction loss")
    dW, db, dr = model.head.backward(cache, dout)
    return dW, db, dr, per


def grad_G(model: TripModel, Xbar, dr) -> list:
    """``dE/dG_k[j_k, m] = sum_n dr[n, m] * sum_{j != j_k} xbar_n[j] prod_{l != k} G_l[j_l, m]``."""
    G = model.G
    K = len(G)
    if K == 1:
        return [Xbar.T @ dr]
    letters = "abcdefgh"[:K]
    grads = []
    for k in range(K):
        ops = [f"n{letters}"] + [f"{letters[l]}m" for l in range(K) if l != k] + ["nm"]
        args = [Xbar] + [G[l] for l in range(K) if l != k] + [dr]
        grads.append(np.einsum(",".join(ops) + f"->{letters[k]}m", *args, optimize=True))
    return grads


def grad_C(model: TripModel, X, dr, Xbar=None) -> list:
    """Gradient of the batch objective with respect to each projection matrix.

    ``dE/dC_k = sum_n Y_nk^T (W x_1 dr_n - (2 lam / b) xbar_n)`` where ``Y_nk`` is
    the sample projected on every mode but ``k``, both sides matricized along
    mode ``k``.
    """
    batch, _ = as_batch(X, model.input_shape)
    Cs = model.C
    if Xbar is None:
        Xbar = project_factors(Cs, batch)
    B = lowrank_expand(dr, model.G) - (2.0 * model.lam / len(batch)) * Xbar
    if isinstance(batch, SparseBatch):
        return _grad_C_sparse(Cs, batch, B)
    K = len(Cs)
    grads = []
    for k in range(K):
        Y = project_factors(Cs, batch, skip=k)
        axes = [0] + [l + 1 for l in range(K) if l != k]
        grads.append(np.tensordot(Y, B, axes=(axes, axes)))
    return grads


def _grad_C_sparse(Cs, X: SparseBatch, B):
    K = len(Cs)
    letters = "abcdefgh"[:K]
    grads = [np.zeros_like(C) for C in Cs]
    for lo in range(0, X.nnz, CHUNK):
        sl = slice(lo, lo + CHUNK)
        idx = X.indices[sl]
        Be = B[X.sample[sl]]
        rows = [C[idx[:, k]] for k, C in enumerate(Cs)]
        for k in range(K):
            if K == 1:
                H = Be
            else:
                ops = [f"e{letters}"] + [f"e{letters[l]}" for l in range(K) if l != k]
                args = [Be] + [rows[l] for l in range(K) if l != k]
                H = np.einsum(",".join(ops) + f"->e{letters[k]}", *args, optimize=True)
            H = H * X.values[sl, None]
            for j in range(H.shape[1]):
                grads[k][:, j] += np.bincount(idx[:, k], weights=H[:, j],
                                              minlength=Cs[k].shape[0])
    return grads


def gradients(model: TripModel, X, y) -> GradientSet:
    """All gradients of the batch objective, including the latent ``dE/dZ``."""
    batch, _ = as_batch(X, model.input_shape)
    Xbar = project_factors(model.C, batch)
    dW, db, dr, per = head_backprop(model, batch, y, Xbar)
    dG = grad_G(model, Xbar, dr)
    dC = grad_C(model, batch, dr, Xbar)
    dZ = [manifold_grad(d, f) for d, f in zip(dC, model.factors)]
    per = per + model.lam * (sqnorms(batch) - sqnorms(Xbar))
    return GradientSet(dZ, dC, dG, dW, db, dr, per, Xbar)


# ---------------------------------------------------------------- training

def _ortho_err(model):
    return max(float(np.abs(C.T @ C - np.eye(C.shape[1])).max()) for C in model.C)


def _clip(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        grads = [g * (max_norm / total) for g in grads]
    return grads


def train(model: TripModel, X, y, config: TrainConfig,
          callback: Optional[Callable[[EpochRecord, TripModel], None]] = None):
    """Train a copy of ``model``; returns ``(trained_model, TrainLog)``.

    Deterministic for a given ``config.seed``. Raises :class:`TrainingError`
    when the objective becomes non-finite.
    """
    batch_all, _ = as_batch(X, model.input_shape)
    y = np.asarray(y)
    N = len(batch_all)
    if N == 0:
        raise ValueError("empty training set")
    if len(y) != N:
        raise ValueError(f"{N} samples but {len(y)} responses")
    rng = np.random.default_rng(config.seed)
    jitter_rng = np.random.default_rng([config.seed, 1])
    model = model.copy()
    head = model.head
    Zs = [f.Z.copy() for f in model.factors]
    own = list(model.G) + head.weights + head.biases
    params = (Zs if config.train_projection else []) + own
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    history = TrainLog()

    def refresh():
        for k, Z in enumerate(Zs):
            f = orthonormalize(Z, jitter_rng)
            if f.Z is not Z:
                Z[...] = f.Z
            model.factors[k] = f

    def step(grads):
        if config.clip_norm is not None:
            grads = _clip(grads, config.clip_norm)
        opt.step(grads)
        if config.train_projection:
            refresh()

    def with_latent(dZ, rest):
        return (list(dZ) + rest) if config.train_projection else rest

    b = config.batch_size
    K = model.order
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(N) if config.shuffle else np.arange(N)
        worst = 0.0
        acc = None
        for i, start in enumerate(range(0, N, b)):
            ids = order[start:start + b]
            try:
                g = gradients(model, batch_all[ids], y[ids])
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {i}: {exc}") from None
            if not np.all(np.isfinite(g.per_sample_loss)):
                raise TrainingError(f"epoch {epoch}, batch {i}: non-finite reconstruction term")
            rest = list(g.dG) + g.dW + g.db
            if not all(np.all(np.isfinite(a)) for a in g.dZ + rest):
                raise TrainingError(f"epoch {epoch}, batch {i}: non-finite gradient")
            if config.orthonormalize_every == "batch":
                step(with_latent(g.dZ, rest))
                worst = max(worst, _ortho_err(model))
            else:
                # one full-gradient update per epoch: batch gradients are
                # means, so weight each by its share of the data
                w = len(ids) / N
                part = [w * d for d in list(g.dC) + rest]
                acc = part if acc is None else [a + p for a, p in zip(acc, part)]
        if acc is not None:
            dZ = [manifold_grad(d, f) for d, f in zip(acc[:K], model.factors)]
            step(with_latent(dZ, acc[K:]))
            worst = _ortho_err(model)
        parts = loss(model, batch_all, y)
        if not np.isfinite(parts.total):
            raise TrainingError(f"epoch {epoch}: non-finite loss after update")
        rec = EpochRecord(epoch, parts.total, parts.pred, parts.recon,
                          fit_metric(model, batch_all, y, parts.output),
                          (time.perf_counter() - t0) * 1e3, worst)
        history.records.append(rec)
        if callback is not None:
            callback(rec, model)
    return model, history
