"""Projection + low-rank first layer + MLP head, and the regularized objective.

A sample ``x`` of shape ``(I_1, ..., I_K)`` is projected to
``xbar = x x_1 C1 ... x_K CK`` of shape ``(J_1, ..., J_K)``. The first layer
computes ``r[m] = sum_j xbar[j] * prod_k G_k[j_k, m]`` without ever forming
the full weight tensor, and an MLP maps ``r`` to class scores or a scalar.

Batches of samples are either dense arrays of shape ``(N, I_1, ..., I_K)`` or
:class:`~trip.tensor.SparseBatch` objects.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .stiefel import LatentFactor, orthonormalize, random_latent
from .tensor import ShapeError, SparseBatch, SparseTensor

HIDDEN_WIDTH = 10
TASKS = ("classification", "regression")
FORMAT_TAG = "TRIP1"


@dataclass(eq=False)
class MlpHead:
    """Affine layers with ReLU between them; weights are ``(fan_in, fan_out)``."""

    weights: list
    biases: list

    @classmethod
    def init(cls, n_in, n_hidden, n_out, rng, width=HIDDEN_WIDTH):
        widths = [n_in] + [width] * n_hidden + [n_out]
        weights = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
                   for a, b in zip(widths[:-1], widths[1:])]
        biases = [np.zeros(b) for b in widths[1:]]
        return cls(weights, biases)

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_hidden(self):
        return len(self.weights) - 1

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, r):
        acts, pre = [r], []
        a = r
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            pre.append(z)
            a = np.maximum(z, 0.0) if l < last else z
            acts.append(a)
        return a, (acts, pre)

    def backward(self, cache, dout):
        """Return (dW list, db list, d input) for upstream gradient ``dout``."""
        acts, pre = cache
        dWs, dbs = [None] * len(self.weights), [None] * len(self.weights)
        dz = dout
        for l in range(len(self.weights) - 1, -1, -1):
            dWs[l] = acts[l].T @ dz
            dbs[l] = dz.sum(axis=0)
            da = dz @ self.weights[l].T
            if l > 0:
                dz = da * (pre[l - 1] > 0)
        return dWs, dbs, da

    def copy(self):
        return MlpHead([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass(eq=False)
class TripModel:
    """Projection factors, low-rank first-layer factors ``G`` and MLP head."""

    factors: list
    G: list
    head: MlpHead
    task: str
    n_outputs: int
    lam: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if len(self.G) != len(self.factors):
            raise ShapeError("need one G factor per mode")
        M = self.rank
        for f, g in zip(self.factors, self.G):
            if g.shape != (f.shape[1], M):
                raise ShapeError(f"G factor of shape {g.shape}, expected {(f.shape[1], M)}")
        if self.head.widths[0] != M or self.head.widths[-1] != self.n_outputs:
            raise ShapeError(f"head widths {self.head.widths} inconsistent with rank {M}")

    @classmethod
    def init(cls, input_shape, subspace, task="classification", n_classes=2,
             n_hidden=0, rank=None, lam=0.0, seed=0, width=HIDDEN_WIDTH):
        """Random model. ``rank`` defaults to ``width`` with hidden layers, else the output width."""
        input_shape = tuple(int(i) for i in np.atleast_1d(input_shape))
        subspace = tuple(int(j) for j in np.atleast_1d(subspace))
        if len(subspace) != len(input_shape):
            raise ShapeError("subspace needs one extent per mode")
        if any(j > i or j < 1 for i, j in zip(input_shape, subspace)):
            raise ShapeError(f"subspace {subspace} must satisfy 1 <= J_k <= I_k {input_shape}")
        if not 0 <= n_hidden <= 4:
            raise ValueError("hidden layer count must be in 0..4")
        n_out = n_classes if task == "classification" else 1
        if rank is None:
            rank = width if n_hidden else n_out
        rng = np.random.default_rng(seed)
        factors = [orthonormalize(random_latent((i, j), rng), rng)
                   for i, j in zip(input_shape, subspace)]
        G = [rng.normal(0.0, 1.0 / np.sqrt(j), size=(j, rank)) for j in subspace]
        head = MlpHead.init(rank, n_hidden, n_out, rng, width)
        return cls(factors, G, head, task, n_out, float(lam))

    @property
    def C(self):
        return [f.C for f in self.factors]

    @property
    def Z(self):
        return [f.Z for f in self.factors]

    @property
    def input_shape(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def subspace(self):
        return tuple(f.shape[1] for f in self.factors)

    @property
    def order(self):
        return len(self.factors)

    @property
    def rank(self):
        return self.G[0].shape[1]

    @property
    def n_params(self):
        """Trainable parameter count (latent matrices, G factors, head)."""
        return (sum(f.Z.size for f in self.factors) + sum(g.size for g in self.G)
                + self.head.n_params)

    def copy(self):
        return replace(self, G=[g.copy() for g in self.G], head=self.head.copy(),
                       factors=list(self.factors), meta=dict(self.meta))

    def with_projection(self, Cs):
        """Same head with fixed orthonormal projections ``Cs``."""
        return replace(self, factors=[orthonormalize(np.asarray(c, dtype=float)) for c in Cs])

    def rotated(self, Rs):
        """Apply the rotation gauge ``C_k -> C_k R_k``, ``G_k -> R_k^T G_k``.

        Predictions and the objective are unchanged.
        """
        factors = []
        for f, R in zip(self.factors, Rs):
            Z = f.Z @ R
            svd = type(f.svd)(f.svd.P, f.svd.S, R.T @ f.svd.Q)
            factors.append(LatentFactor(Z, svd, f.C @ R))
        G = [R.T @ g for g, R in zip(self.G, Rs)]
        return replace(self, factors=factors, G=G, head=self.head.copy())


class LossParts(NamedTuple):
    total: float
    pred: float
    recon: float
    per_sample: np.ndarray
    output: Optional[np.ndarray] = None


# ---------------------------------------------------------------- batching

def as_batch(X, input_shape):
    """Normalize a sample or collection of samples to a batch.

    Returns ``(batch, single)``; ``single`` tells whether one sample was given.
    """
    input_shape = tuple(input_shape)
    if isinstance(X, SparseBatch):
        _check_shape(X.shape, input_shape)
        return X, False
    if isinstance(X, SparseTensor):
        _check_shape(X.shape, input_shape)
        return SparseBatch.from_tensors([X]), True
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], SparseTensor):
        return SparseBatch.from_tensors(X, input_shape), False
    X = np.asarray(X, dtype=np.float64)
    if X.shape == input_shape:
        return X[None], True
    _check_shape(X.shape[1:], input_shape)
    return X, False


def _check_shape(got, want):
    if tuple(got) != tuple(want):
        raise ShapeError(f"sample shape {tuple(got)} does not match model input {tuple(want)}")


def sqnorms(X) -> np.ndarray:
    if isinstance(X, SparseBatch):
        return X.sqnorms()
    return np.einsum("ni,ni->n", X.reshape(len(X), -1), X.reshape(len(X), -1))


def project_factors(Cs, X, skip=None) -> np.ndarray:
    """Project a batch with ``Cs`` on every mode except ``skip``.

    Dense input costs one tensordot per mode; sparse input costs
    ``O(nnz * prod J)`` and does not support ``skip``.
    """
    if isinstance(X, SparseBatch):
        if skip is not None:
            raise ValueError("partial projection is only available for dense batches")
        return _project_sparse(Cs, X)
    out = X
    if len(Cs) == 1:
        return out if skip == 0 else out @ Cs[0]
    for k, C in enumerate(Cs):
        if k == skip:
            continue
        out = np.moveaxis(np.tensordot(out, C, axes=([k + 1], [0])), -1, k + 1)
    return out


CHUNK = 1 << 16


def entry_outer(values, rows):
    """``values[e] * outer(rows[0][e], ..., rows[K-1][e])`` for every entry ``e``."""
    F = values
    for k, R in enumerate(rows):
        F = F[..., None] * R.reshape((len(R),) + (1,) * k + (R.shape[1],))
    return F


def segment_sum(F, sample, n):
    """Sum rows of ``F`` sharing a (sorted) sample id into an ``(n, ...)`` array."""
    out = np.zeros((n,) + F.shape[1:])
    if len(F):
        starts = np.flatnonzero(np.concatenate([[True], sample[1:] != sample[:-1]]))
        out[sample[starts]] = np.add.reduceat(F, starts, axis=0)
    return out


def _project_sparse(Cs, X):
    ext = tuple(C.shape[1] for C in Cs)
    out = np.zeros((X.n_samples,) + ext)
    for lo in range(0, X.nnz, CHUNK):
        sl = slice(lo, lo + CHUNK)
        rows = [C[X.indices[sl, k]] for k, C in enumerate(Cs)]
        out += segment_sum(entry_outer(X.values[sl], rows), X.sample[sl], X.n_samples)
    return out


_LETTERS = "abcdefgh"


def lowrank_contract(Xbar, G) -> np.ndarray:
    """``r[n, m] = sum_j Xbar[n, j] prod_k G_k[j_k, m]`` evaluated mode by mode."""
    K = len(G)
    if K == 1:
        return Xbar @ G[0]
    letters = _LETTERS[:K]
    acc = np.einsum(f"n{letters},{letters[0]}m->n{letters[1:]}m", Xbar, G[0])
    for k in range(1, K):
        rest = letters[k:]
        acc = np.einsum(f"n{rest}m,{rest[0]}m->n{rest[1:]}m", acc, G[k])
    return acc


def lowrank_expand(dr, G) -> np.ndarray:
    """``out[n, j] = sum_m dr[n, m] prod_k G_k[j_k, m]`` (the first layer's transpose)."""
    K = len(G)
    if K == 1:
        return dr @ G[0].T
    letters = _LETTERS[:K]
    ops = ",".join(f"{l}m" for l in letters)
    return np.einsum(f"nm,{ops}->n{letters}", dr, *G, optimize=True)


# ---------------------------------------------------------------- public ops

def project(model: TripModel, X) -> np.ndarray:
    """Projected tensor(s) ``xbar`` of shape ``(J_1, ..., J_K)``."""
    batch, single = as_batch(X, model.input_shape)
    out = project_factors(model.C, batch)
    return out[0] if single else out


def first_layer(model: TripModel, Xbar) -> np.ndarray:
    Xbar = np.asarray(Xbar, dtype=np.float64)
    single = Xbar.shape == model.subspace
    if single:
        Xbar = Xbar[None]
    elif Xbar.shape[1:] != model.subspace:
        raise ShapeError(f"projected shape {Xbar.shape[1:]} != subspace {model.subspace}")
    r = lowrank_contract(Xbar, model.G)
    return r[0] if single else r


def head_output(model: TripModel, Xbar) -> np.ndarray:
    """Raw head output on projected samples: class logits or the regression value."""
    Xbar = np.asarray(Xbar, dtype=np.float64)
    single = Xbar.shape == model.subspace
    out, _ = model.head.forward(lowrank_contract(Xbar[None] if single else Xbar, model.G))
    if model.task == "regression":
        out = out[:, 0]
    return out[0] if single else out


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_projected(model: TripModel, Xbar) -> np.ndarray:
    out = head_output(model, Xbar)
    return softmax(out) if model.task == "classification" else out


def predict(model: TripModel, X) -> np.ndarray:
    """Class probabilities ``(N, n_classes)`` or regression values ``(N,)``."""
    batch, single = as_batch(X, model.input_shape)
    out = predict_projected(model, project_factors(model.C, batch))
    return out[0] if single else out


def prediction_loss(model: TripModel, out, y):
    """Per-sample loss and gradient of the batch-mean loss w.r.t. ``out``.

    ``out`` is the raw head output of shape ``(b, n_outputs)``.
    """
    b = len(out)
    if model.task == "classification":
        y = np.asarray(y, dtype=np.int64)
        if y.min() < 0 or y.max() >= model.n_outputs:
            raise ValueError(f"class label out of range 0..{model.n_outputs - 1}")
        z = out - out.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        per = logsum - z[np.arange(b), y]
        dout = softmax(out)
        dout[np.arange(b), y] -= 1.0
    else:
        diff = out[:, 0] - np.asarray(y, dtype=np.float64)
        per = diff * diff
        dout = (2.0 * diff)[:, None]
    return per, dout / b


def loss(model: TripModel, X, y) -> LossParts:
    """Batch mean of prediction loss plus ``lam`` times reconstruction error.

    The reconstruction error is evaluated as ``|x|^2 - |xbar|^2``, which equals
    ``|x - xbar x_k C_k^T|^2`` for orthonormal projections.
    """
    batch, single = as_batch(X, model.input_shape)
    y = np.atleast_1d(y)
    if len(batch) == 0:
        raise ValueError("empty batch")
    if len(y) != len(batch):
        raise ValueError(f"{len(batch)} samples but {len(y)} responses")
    Xbar = project_factors(model.C, batch)
    out, _ = model.head.forward(lowrank_contract(Xbar, model.G))
    pred, _ = prediction_loss(model, out, y)
    recon = sqnorms(batch) - sqnorms(Xbar)
    per = pred + model.lam * recon
    return LossParts(float(per.mean()), float(pred.mean()), float(recon.mean()), per, out)


def reconstruction_error(model: TripModel, X) -> np.ndarray:
    """Direct ``|x - xbar x_k C_k^T|^2`` per sample, computed densely."""
    batch, _ = as_batch(X, model.input_shape)
    dense = batch.to_dense() if isinstance(batch, SparseBatch) else batch
    Xbar = project_factors(model.C, dense)
    back = project_factors([C.T for C in model.C], Xbar)
    return sqnorms(dense - back)


# ---------------------------------------------------------------- model files

def _fmt(v):
    return format(float(v), ".17g")


def dumps_model(model: TripModel) -> str:
    buf = io.StringIO()
    w = buf.write
    w(f"{FORMAT_TAG} {model.order} {model.task}\n")
    w("input_shape " + " ".join(map(str, model.input_shape)) + "\n")
    w("subspace " + " ".join(map(str, model.subspace)) + "\n")
    w(f"rank {model.rank}\n")
    w(f"outputs {model.n_outputs}\n")
    w(f"hidden {model.head.n_hidden} {model.head.widths[1] if model.head.n_hidden else 0}\n")
    w(f"lambda {_fmt(model.lam)}\n")

    def matrix(name, m):
        w(f"matrix {name} {m.shape[0]} {m.shape[1]}\n")
        for row in m:
            w(" ".join(_fmt(v) for v in row) + "\n")

    for k, f in enumerate(model.factors):
        matrix(f"Z{k}", f.Z)
    for k, g in enumerate(model.G):
        matrix(f"G{k}", g)
    for l, (W, b) in enumerate(zip(model.head.weights, model.head.biases)):
        matrix(f"W{l}", W)
        matrix(f"b{l}", b[None, :])
    return buf.getvalue()


def loads_model(text: str) -> TripModel:
    lines = iter(text.splitlines())
    head = next(lines).split()
    if len(head) != 3 or head[0] != FORMAT_TAG:
        raise ValueError(f"not a {FORMAT_TAG} model file")
    K, task = int(head[1]), head[2]
    fields = {}
    for _ in range(6):
        parts = next(lines).split()
        fields[parts[0]] = parts[1:]
    mats = {}
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] != "matrix":
            raise ValueError(f"unexpected line {line!r}")
        name, r, c = parts[1], int(parts[2]), int(parts[3])
        mats[name] = np.array([[float(v) for v in next(lines).split()] for _ in range(r)]
                              ).reshape(r, c)
    n_hidden = int(fields["hidden"][0])
    factors = [orthonormalize(mats[f"Z{k}"]) for k in range(K)]
    G = [mats[f"G{k}"] for k in range(K)]
    head_ = MlpHead([mats[f"W{l}"] for l in range(n_hidden + 1)],
                    [mats[f"b{l}"][0] for l in range(n_hidden + 1)])
    model = TripModel(factors, G, head_, task, int(fields["outputs"][0]),
                      float(fields["lambda"][0]))
    if model.input_shape != tuple(int(v) for v in fields["input_shape"]):
        raise ValueError("input_shape line disagrees with stored matrices")
    return model


def save_model(model: TripModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> TripModel:
    return loads_model(Path(path).read_text())
