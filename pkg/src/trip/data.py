"""Datasets, normalization, synthetic generators, file formats, CV and the PCA baseline."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .metrics import accuracy, auc, rmse
from .model import TripModel, predict
from .stiefel import orthonormalize, thin_svd
from .tensor import SparseBatch
from .training import TrainConfig, train

log = logging.getLogger(__name__)


class FormatError(ValueError):
    """Malformed dataset file; the message names the offending line."""


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray


@dataclass(eq=False)
class Dataset:
    """Samples with scalar responses.

    ``X`` is a dense array ``(N, I_1, ..., I_K)`` or a :class:`SparseBatch`.
    For classification ``y`` holds class ids in ``[0, n_classes)``.
    """

    X: object
    y: np.ndarray
    task: str = "classification"
    n_classes: int = 0
    norm: Optional[NormStats] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} samples but {len(self.y)} responses")
        if self.task == "classification":
            self.y = self.y.astype(np.int64)
            if self.n_classes == 0 and len(self.y):
                self.n_classes = int(self.y.max()) + 1
            if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
                raise ValueError("class ids must lie in [0, n_classes)")
        elif self.task == "regression":
            self.y = self.y.astype(np.float64)
        else:
            raise ValueError(f"unknown task {self.task!r}")

    def __len__(self):
        return len(self.y)

    @property
    def shape(self):
        return tuple(self.X.shape) if isinstance(self.X, SparseBatch) else self.X.shape[1:]

    @property
    def sparse(self):
        return isinstance(self.X, SparseBatch)

    @property
    def nnz(self):
        return self.X.nnz if self.sparse else int(np.count_nonzero(self.X))

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids)
        return replace(self, X=self.X[ids], y=self.y[ids], meta=dict(self.meta))


# ---------------------------------------------------------------- normalization

def fit_norm(ds: Dataset) -> NormStats:
    if ds.sparse or len(ds.shape) != 1:
        raise ValueError("normalization applies to dense vector data only")
    mean = ds.X.mean(axis=0)
    std = ds.X.std(axis=0)
    const = std == 0
    return NormStats(mean, np.where(const, 1.0, std), const)


def normalize(ds: Dataset, stats: Optional[NormStats] = None) -> Dataset:
    """Center every variable and scale it to unit standard deviation.

    Constant variables are only centered and flagged in ``stats.constant``.
    ``stats`` lets a test fold reuse statistics computed on training folds.
    """
    if ds.norm is not None:
        raise ValueError("dataset is already normalized")
    stats = stats if stats is not None else fit_norm(ds)
    if stats.constant.any():
        log.info("%d constant variable(s) left unscaled", int(stats.constant.sum()))
    return replace(ds, X=(ds.X - stats.mean) / stats.std, norm=stats, meta=dict(ds.meta))


# ---------------------------------------------------------------- generators

def _spiral_latent(rng, n_per_class, n_noise, dim):
    x = rng.uniform(0.0, 3.5 * np.pi, size=2 * n_per_class)
    a, b = x[:n_per_class], x[n_per_class:]
    arm0 = np.column_stack([a * np.sin(a), a * np.cos(a)])
    arm1 = np.column_stack([b * np.sin(b + np.pi), b * np.cos(b + np.pi)])
    noise = rng.uniform(-10.0, 10.0, size=(2 * n_noise, 2))
    pts = np.vstack([arm0, noise[:n_noise], arm1, noise[n_noise:]])
    y = np.repeat([0, 1], n_per_class + n_noise)
    pts = pts / pts.std(axis=0)
    n = len(pts)
    major = rng.normal(0.0, 1.0, size=(n, 1))
    minor = rng.normal(0.0, 0.1, size=(n, dim - 3))
    return np.hstack([pts, major, minor]), y


def gen_spiral(seed=0, n_per_class=100, n_noise=10, dim=100):
    """Two-arm spiral hidden in ``dim`` dimensions by a random rotation.

    Returns ``(train, test)``; both share one rotation and are drawn
    independently. ``meta`` holds the rotation and the unrotated coordinates.
    """
    rng = np.random.default_rng(seed)
    rotation = orthonormalize(rng.standard_normal((dim, dim))).C
    out = []
    for _ in range(2):
        latent, y = _spiral_latent(rng, n_per_class, n_noise, dim)
        out.append(Dataset(latent @ rotation.T, y, "classification", 2,
                           meta={"kind": "spiral", "seed": seed, "rotation": rotation,
                                 "latent": latent}))
    return tuple(out)


RANDOM_PRESETS = {
    "rand1": (1000,),
    "rand2": (1000, 1000),
    "rand3": (1000, 1000, 1000),
}


def gen_random_tensor(extents, n_samples=100, nnz=100, seed=0) -> Dataset:
    """Sparse samples with ``nnz`` distinct uniformly placed N(0, 1) entries and random binary labels."""
    extents = tuple(int(e) for e in np.atleast_1d(extents))
    total = int(np.prod(extents, dtype=object))
    if nnz > total:
        raise ValueError(f"nnz={nnz} exceeds the {total} cells of a {extents} tensor")
    rng = np.random.default_rng(seed)
    idx, vals = [], []
    for _ in range(n_samples):
        flat = rng.choice(total, size=nnz, replace=False) if nnz else np.zeros(0, dtype=np.int64)
        idx.append(np.column_stack(np.unravel_index(np.sort(flat), extents, order="F"))
                   if nnz else np.zeros((0, len(extents)), dtype=np.int64))
        vals.append(rng.standard_normal(nnz))
    y = rng.integers(0, 2, size=n_samples)
    sample = np.repeat(np.arange(n_samples), nnz)
    X = SparseBatch(extents, sample, np.concatenate(idx), np.concatenate(vals), n_samples)
    return Dataset(X, y, "classification", 2, meta={"kind": "random", "seed": seed})


def gen_preset(kind: str, seed=0, n_samples=100, nnz=100):
    if kind == "spiral":
        return gen_spiral(seed)
    if kind not in RANDOM_PRESETS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    ds = gen_random_tensor(RANDOM_PRESETS[kind], n_samples, nnz, seed)
    ds.meta["kind"] = kind
    return ds


# ---------------------------------------------------------------- file formats

def load_dense_csv(path, response=None, task="classification") -> Dataset:
    """One sample per row under a header; ``response`` names the response column (default: last).

    Classification labels of any type are mapped to ids in sorted order; the
    original labels are kept in ``meta["classes"]``.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    col = len(header) - 1 if response is None else header.index(response)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            feats.append([float(v) for i, v in enumerate(row) if i != col])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric feature value") from None
        labels.append(row[col].strip())
    X = np.array(feats, dtype=np.float64).reshape(len(feats), len(header) - 1)
    meta = {"features": [h for i, h in enumerate(header) if i != col],
            "response": header[col]}
    if task == "classification":
        try:
            keys = [float(v) for v in labels]
            numeric = True
        except ValueError:
            keys, numeric = labels, False
        classes = sorted(set(keys))
        lookup = {c: i for i, c in enumerate(classes)}
        y = np.array([lookup[k] for k in keys], dtype=np.int64)
        meta["classes"] = [labels[keys.index(c)] for c in classes] if numeric else classes
        return Dataset(X, y, task, len(classes), meta=meta)
    try:
        y = np.array([float(v) for v in labels])
    except ValueError:
        raise FormatError(f"{path}: non-numeric regression response") from None
    return Dataset(X, y, task, meta=meta)


def save_dense_csv(ds: Dataset, path) -> None:
    if ds.sparse or len(ds.shape) != 1:
        raise ValueError("dense CSV holds vector samples only")
    feats = ds.meta.get("features") or [f"x{i + 1}" for i in range(ds.shape[0])]
    resp = ds.meta.get("response", "y")
    classes = ds.meta.get("classes")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(feats) + [resp])
        for x, y in zip(ds.X, ds.y):
            label = classes[y] if (classes and ds.task == "classification") else y
            if ds.task == "regression":
                label = format(float(y), ".17g")
            w.writerow([format(v, ".17g") for v in x] + [label])


def _responses_path(path):
    return Path(path).with_suffix(".y")


def load_sparse_tensor(path) -> Dataset:
    """Coordinate-list tensor file plus a sibling ``.y`` response file.

    First line ``shape I1 ... IK N task``; then one ``n i1 ... iK value`` line
    per non-zero, all indices 1-based.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}:1: missing shape line")
    head = lines[0].split()
    if len(head) < 4 or head[0] != "shape":
        raise FormatError(f"{path}:1: expected 'shape I1 ... IK N task'")
    try:
        dims = [int(v) for v in head[1:-1]]
    except ValueError:
        raise FormatError(f"{path}:1: non-integer extent") from None
    task = head[-1]
    if task not in ("classification", "regression"):
        raise FormatError(f"{path}:1: unknown task {task!r}")
    shape, N = tuple(dims[:-1]), dims[-1]
    K = len(shape)
    if K < 1 or any(d < 1 for d in shape) or N < 0:
        raise FormatError(f"{path}:1: invalid shape")
    sample, idx, vals, seen = [], [], [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != K + 2:
            raise FormatError(f"{path}:{lineno}: expected {K + 2} fields, got {len(parts)}")
        try:
            coords = tuple(int(v) for v in parts[:-1])
            value = float(parts[-1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed entry") from None
        if not 1 <= coords[0] <= N or any(not 1 <= c <= d for c, d in zip(coords[1:], shape)):
            raise FormatError(f"{path}:{lineno}: index {coords} outside declared shape")
        if coords in seen:
            raise FormatError(f"{path}:{lineno}: duplicate entry {coords} "
                              f"(first on line {seen[coords]})")
        seen[coords] = lineno
        if value == 0:
            continue
        sample.append(coords[0] - 1)
        idx.append([c - 1 for c in coords[1:]])
        vals.append(value)
    ypath = _responses_path(path)
    try:
        ylines = [l.strip() for l in ypath.read_text().splitlines() if l.strip()]
    except FileNotFoundError:
        raise FormatError(f"{path}: missing response file {ypath}") from None
    if len(ylines) != N:
        raise FormatError(f"{ypath}: expected {N} responses, got {len(ylines)}")
    try:
        y = np.array([float(v) for v in ylines])
    except ValueError:
        raise FormatError(f"{ypath}: non-numeric response") from None
    X = SparseBatch(shape, sample, np.array(idx, dtype=np.int64).reshape(-1, K), vals, N)
    if task == "classification":
        if np.any(y != np.round(y)):
            raise FormatError(f"{ypath}: class ids must be integers")
        y = y.astype(np.int64)
    return Dataset(X, y, task, meta={"source": str(path)})


def save_sparse_tensor(ds: Dataset, path) -> None:
    X = ds.X if ds.sparse else SparseBatch.from_dense(ds.X)
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("shape " + " ".join(map(str, X.shape)) + f" {len(X)} {ds.task}\n")
        for n, ix, v in zip(X.sample, X.indices, X.values):
            fh.write(f"{n + 1} " + " ".join(str(i + 1) for i in ix) + f" {v:.17g}\n")
    with open(_responses_path(path), "w") as fh:
        for v in ds.y:
            fh.write((str(int(v)) if ds.task == "classification" else format(float(v), ".17g")) + "\n")


# ---------------------------------------------------------------- PCA baseline

def pca_baseline(ds: Dataset, J: int) -> np.ndarray:
    """Top-``J`` principal directions (``I x J``, orthonormal) of centered vector data.

    Columns carry the same sign rule as :func:`trip.stiefel.thin_svd`.
    """
    if ds.sparse or len(ds.shape) != 1:
        raise ValueError("PCA baseline needs dense vector data")
    Xc = ds.X - ds.X.mean(axis=0)
    N, I = Xc.shape
    if N >= I:
        svd = thin_svd(Xc)
        V, S = svd.Q, svd.S
    else:
        svd = thin_svd(Xc.T)
        V, S = svd.P.copy(), svd.S
        rows = np.argmax(np.abs(V), axis=0)
        V[:, V[rows, np.arange(V.shape[1])] < 0] *= -1
    rank = int(np.sum(S > S[0] * 1e-12)) if S[0] > 0 else 0
    if J > rank:
        raise ValueError(f"requested {J} components but data rank is {rank}")
    return V[:, :J].copy()


# ---------------------------------------------------------------- cross validation

@dataclass
class ModelSpec:
    """Everything needed to build and train one model on a training split."""

    subspace: tuple = (2,)
    n_hidden: int = 0
    lam: float = 0.01
    rank: Optional[int] = None
    width: int = 10
    method: str = "trip"
    normalize: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.method not in ("trip", "pcann"):
            raise ValueError(f"unknown method {self.method!r}")


def fit_model(spec: ModelSpec, ds: Dataset, seed: int = 0):
    """Initialize and train a model on ``ds``; returns ``(model, log)``.

    ``pcann`` fixes the projection to the PCA directions of ``ds`` and trains
    only the head.
    """
    n_classes = max(ds.n_classes, 2) if ds.task == "classification" else 0
    lam = spec.lam if spec.method == "trip" else 0.0
    model = TripModel.init(ds.shape, spec.subspace, ds.task, n_classes, spec.n_hidden,
                           spec.rank, lam, seed, spec.width)
    cfg = replace(spec.train, seed=seed)
    if spec.method == "pcann":
        model = model.with_projection([pca_baseline(ds, spec.subspace[0])])
        cfg = replace(cfg, train_projection=False)
    return train(model, ds.X, ds.y, cfg)


def evaluate(model: TripModel, ds: Dataset) -> dict:
    """Task metrics: accuracy (+ AUC for two classes) or RMSE."""
    out = predict(model, ds.X)
    if model.task == "regression":
        return {"rmse": rmse(out, ds.y)}
    res = {"accuracy": accuracy(out, ds.y)}
    if model.n_outputs == 2:
        try:
            res["auc"] = auc(out[:, 1], ds.y)
        except ValueError:
            log.info("single-class evaluation set; AUC skipped")
            res["auc"] = float("nan")
    return res


@dataclass
class CvPlan:
    folds: int = 10
    trials: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2 or self.trials < 1:
            raise ValueError("need folds >= 2 and trials >= 1")

    def assignments(self, n):
        """Per trial, a list of test-index arrays partitioning ``range(n)``."""
        if n < self.folds:
            raise ValueError(f"{n} samples cannot fill {self.folds} folds")
        out = []
        for t in range(self.trials):
            perm = np.random.default_rng([self.seed, t]).permutation(n)
            out.append([np.sort(f) for f in np.array_split(perm, self.folds)])
        return out


@dataclass
class CvResult:
    rows: list

    def metric(self, name, split="test"):
        return np.array([r[f"{split}_{name}"] for r in self.rows])

    def summary(self) -> dict:
        keys = [k for k in self.rows[0] if k.startswith(("test_", "fit_"))]
        out = {}
        for k in keys:
            vals = np.array([r[k] for r in self.rows], dtype=float)
            vals = vals[~np.isnan(vals)]
            out[k] = (float(vals.mean()), float(vals.std())) if len(vals) else (np.nan, np.nan)
        return out


def run_cv(ds: Dataset, spec: ModelSpec, plan: CvPlan) -> CvResult:
    """Repeated k-fold cross validation.

    Normalization statistics (when ``spec.normalize`` and the data are dense
    vectors) come from the training folds only.
    """
    rows = []
    can_norm = spec.normalize and not ds.sparse and len(ds.shape) == 1 and ds.norm is None
    for t, folds in enumerate(plan.assignments(len(ds))):
        for f, test_ids in enumerate(folds):
            train_ids = np.setdiff1d(np.arange(len(ds)), test_ids)
            tr, te = ds.subset(train_ids), ds.subset(test_ids)
            if can_norm:
                stats = fit_norm(tr)
                tr, te = normalize(tr, stats), normalize(te, stats)
            model, _ = fit_model(spec, tr, seed=plan.seed * 100003 + t * 1000 + f)
            row = {"trial": t, "fold": f, "n_test": len(te)}
            row.update({f"test_{k}": v for k, v in evaluate(model, te).items()})
            row.update({f"fit_{k}": v for k, v in evaluate(model, tr).items()})
            rows.append(row)
    return CvResult(rows)
