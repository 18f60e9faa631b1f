"""Dense and sparse tensors and the multilinear operators used by the model.

Dense tensors are plain ``numpy.ndarray`` objects. Whenever a tensor is
flattened (``vectorize``, ``matricize``) the first index varies fastest, i.e.
Fortran order. Sparse tensors use a coordinate list.

Modes are numbered from 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Sequence, Union

import numpy as np

MAX_ORDER = 8


class ShapeError(ValueError):
    """Raised when operand shapes or mode indices are inconsistent."""


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """K-th order tensor stored as a list of (index tuple, value) entries.

    Parameters
    ----------
    shape : tuple of int
        Extents ``(I_1, ..., I_K)``.
    indices : (nnz, K) int array
        Zero-based coordinates, one row per stored entry.
    values : (nnz,) float array
        Entry values. Explicit zeros are dropped on construction.
    """

    shape: tuple
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        _check_shape(shape)
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, len(shape))
        val = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if idx.shape[0] != val.shape[0]:
            raise ShapeError(f"{idx.shape[0]} indices but {val.shape[0]} values")
        if idx.size and (idx.min() < 0 or np.any(idx.max(axis=0) >= np.array(shape))):
            raise ShapeError(f"index out of range for shape {shape}")
        keep = val != 0
        idx, val = idx[keep], val[keep]
        if len(val) > 1:
            flat = np.ravel_multi_index(idx.T, shape, order="F")
            if len(np.unique(flat)) != len(flat):
                raise ValueError("duplicate index tuples in sparse tensor")
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        if self.nnz:
            out[tuple(self.indices.T)] = self.values
        return out

    @classmethod
    def from_dense(cls, array) -> "SparseTensor":
        array = np.asarray(array, dtype=np.float64)
        idx = np.argwhere(array != 0)
        # argwhere yields C order; store entries in first-index-fastest order
        if len(idx):
            order = np.argsort(np.ravel_multi_index(idx.T, array.shape, order="F"))
            idx = idx[order]
        return cls(array.shape, idx, array[tuple(idx.T)])

    def sqnorm(self) -> float:
        return float(self.values @ self.values)

    def __repr__(self):
        return f"SparseTensor(shape={self.shape}, nnz={self.nnz})"


Tensor = Union[np.ndarray, SparseTensor]


def _check_shape(shape):
    if len(shape) < 1 or len(shape) > MAX_ORDER:
        raise ShapeError(f"tensor order must be in 1..{MAX_ORDER}, got {len(shape)}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"every extent must be >= 1, got {shape}")


def densify(t: Tensor) -> np.ndarray:
    if isinstance(t, SparseTensor):
        return t.to_dense()
    return np.asarray(t, dtype=np.float64)


def _check_mode(t, k):
    if not 0 <= k < t.ndim:
        raise ShapeError(f"mode {k} out of range for order-{t.ndim} tensor")


def vectorize(t: Tensor) -> np.ndarray:
    """Stack the entries of ``t`` into a vector, first index fastest."""
    return densify(t).ravel(order="F")


def matricize(t: Tensor, k: int) -> np.ndarray:
    """Mode-k matricization with one *column* per index of mode k.

    Column ``j`` is the vectorized ``j``-th slice along mode ``k``, so the
    result has shape ``(prod of other extents, I_k)``.
    """
    t = densify(t)
    _check_mode(t, k)
    moved = np.moveaxis(t, k, -1)
    return moved.reshape(-1, t.shape[k], order="F")


def fold(m: np.ndarray, k: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`matricize`."""
    shape = tuple(shape)
    rest = shape[:k] + shape[k + 1:]
    moved = np.asarray(m).reshape(rest + (shape[k],), order="F")
    return np.moveaxis(moved, -1, k)


def mode_product(t: Tensor, w: np.ndarray, k: int) -> np.ndarray:
    """k-mode product ``t x_k w``.

    ``w`` has shape ``(I_k, J)`` and replaces extent ``I_k`` by ``J``. A 1-D
    ``w`` contracts the mode away, lowering the order by one.
    """
    w = np.asarray(w, dtype=np.float64)
    if isinstance(t, SparseTensor):
        _check_mode(t, k)
        if w.shape[0] != t.shape[k]:
            raise ShapeError(f"w has {w.shape[0]} rows, mode {k} has extent {t.shape[k]}")
        return _sparse_mode_product(t, w, k)
    t = np.asarray(t, dtype=np.float64)
    _check_mode(t, k)
    if w.ndim not in (1, 2) or w.shape[0] != t.shape[k]:
        raise ShapeError(f"w of shape {w.shape} does not match mode {k} extent {t.shape[k]}")
    out = np.tensordot(t, w, axes=([k], [0]))
    if w.ndim == 2:
        out = np.moveaxis(out, -1, k)
    return out


def _sparse_mode_product(t: SparseTensor, w, k):
    rest = t.shape[:k] + t.shape[k + 1:]
    cols = w.shape[1] if w.ndim == 2 else None
    out = np.zeros(rest + ((cols,) if cols else ()))
    if t.nnz:
        other = np.delete(t.indices, k, axis=1)
        contrib = t.values[:, None] * w[t.indices[:, k]].reshape(t.nnz, -1)
        if rest:
            flat = np.ravel_multi_index(other.T, rest)
            acc = np.zeros((int(np.prod(rest)), contrib.shape[1]))
            np.add.at(acc, flat, contrib)
            out = acc.reshape(out.shape)
        else:
            out = contrib.sum(axis=0).reshape(out.shape)
    if cols:
        out = np.moveaxis(out, -1, k)
    return out


def multi_mode_product(t: Tensor, ws: Sequence[np.ndarray]) -> np.ndarray:
    """Apply ``t x_1 w_1 ... x_K w_K`` in ascending mode order."""
    if len(ws) != t.ndim:
        raise ShapeError(f"need {t.ndim} factors, got {len(ws)}")
    out = t
    for k, w in enumerate(ws):
        w = np.asarray(w)
        if w.ndim != 2:
            raise ShapeError("multi_mode_product takes matrices; use mode_product for vectors")
        out = mode_product(out, w, k)
    return densify(out)


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; column r is ``kron(a[:, r], b[:, r])``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


def tensor_times_kr(t: Tensor, w: np.ndarray, k: int) -> np.ndarray:
    """Append a mode of extent J: ``out[..., i_k, ..., j] = t[..., i_k, ...] * w[i_k, j]``.

    Under first-index-fastest flattening this satisfies
    ``matricize(out, k) == khatri_rao(w.T, matricize(t, k))``.
    """
    t = densify(t)
    _check_mode(t, k)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != t.shape[k]:
        raise ShapeError(f"w of shape {w.shape} does not match mode {k} extent {t.shape[k]}")
    bshape = [1] * t.ndim + [w.shape[1]]
    bshape[k] = w.shape[0]
    return t[..., None] * w.reshape(bshape)


def outer(vectors: Sequence[np.ndarray]) -> np.ndarray:
    vectors = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    if not vectors:
        raise ShapeError("outer needs at least one vector")
    return reduce(np.multiply.outer, vectors)


def inner(a: Tensor, b: Tensor) -> float:
    a, b = densify(a), densify(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def frob_norm(t: Tensor) -> float:
    if isinstance(t, SparseTensor):
        return float(np.sqrt(t.sqnorm()))
    return float(np.sqrt(inner(t, t)))


class SparseBatch:
    """A collection of same-shape sparse samples packed into one coordinate list.

    Entries are grouped by sample, so sample ``n`` owns the entry range
    ``ptr[n]:ptr[n + 1]``. Indexing with an int yields a :class:`SparseTensor`;
    indexing with an array yields a new batch.
    """

    def __init__(self, shape, sample, indices, values, n_samples):
        self.shape = tuple(int(s) for s in shape)
        _check_shape(self.shape)
        sample = np.asarray(sample, dtype=np.int64)
        order = np.argsort(sample, kind="stable")
        self.sample = sample[order]
        self.indices = np.asarray(indices, dtype=np.int64).reshape(-1, len(self.shape))[order]
        self.values = np.asarray(values, dtype=np.float64)[order]
        self.n_samples = int(n_samples)
        counts = np.bincount(self.sample, minlength=self.n_samples)
        self.ptr = np.concatenate([[0], np.cumsum(counts)])

    @classmethod
    def from_tensors(cls, tensors: Sequence[SparseTensor], shape=None) -> "SparseBatch":
        tensors = list(tensors)
        if shape is None:
            if not tensors:
                raise ShapeError("cannot infer shape of an empty batch")
            shape = tensors[0].shape
        shape = tuple(shape)
        for t in tensors:
            if t.shape != shape:
                raise ShapeError(f"sample shape {t.shape} differs from {shape}")
        K = len(shape)
        sample = np.repeat(np.arange(len(tensors)), [t.nnz for t in tensors])
        idx = np.concatenate([t.indices for t in tensors]) if tensors else np.zeros((0, K))
        val = np.concatenate([t.values for t in tensors]) if tensors else np.zeros(0)
        return cls(shape, sample, idx, val, len(tensors))

    @classmethod
    def from_dense(cls, X) -> "SparseBatch":
        X = np.asarray(X, dtype=np.float64)
        return cls.from_tensors([SparseTensor.from_dense(x) for x in X], X.shape[1:])

    def __len__(self):
        return self.n_samples

    @property
    def nnz(self) -> int:
        return len(self.values)

    def __getitem__(self, item):
        if np.isscalar(item):
            n = int(item)
            if n < 0:
                n += self.n_samples
            lo, hi = self.ptr[n], self.ptr[n + 1]
            return SparseTensor(self.shape, self.indices[lo:hi], self.values[lo:hi])
        ids = np.arange(self.n_samples)[item]
        lo, hi = self.ptr[ids], self.ptr[ids + 1]
        counts = hi - lo
        pos = np.repeat(lo - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        pos = pos + np.arange(counts.sum())
        sample = np.repeat(np.arange(len(ids)), counts)
        return SparseBatch(self.shape, sample, self.indices[pos], self.values[pos], len(ids))

    def __iter__(self):
        for n in range(self.n_samples):
            yield self[n]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_samples,) + self.shape)
        out[(self.sample,) + tuple(self.indices.T)] = self.values
        return out

    def sqnorms(self) -> np.ndarray:
        return np.bincount(self.sample, weights=self.values ** 2, minlength=self.n_samples)

    def __repr__(self):
        return f"SparseBatch(n={self.n_samples}, shape={self.shape}, nnz={self.nnz})"
