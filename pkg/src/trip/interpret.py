"""Post-hoc views of a trained subspace.

A rank-1 linear surrogate ``<xbar, g1 o ... o gK> + b`` is fitted to the
model's own outputs by weighted alternating least squares. Its coefficients
fix a rotation of each projection (the gauge ``C -> C R`` leaves predictions
unchanged) and, with Gaussian similarity weights around one sample, give local
regression coefficients for that sample.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import TripModel, as_batch, head_output, predict_projected, project_factors
from .stiefel import thin_svd
from .tensor import outer

log = logging.getLogger(__name__)

MAX_SWEEPS = 100
REL_TOL = 1e-8
RIDGE = 1e-10
COND_LIMIT = 1e12


class SurrogateError(ValueError):
    pass


@dataclass
class SurrogateModel:
    """Rank-1 linear surrogate ``<xbar, outer(g)> + bias``.

    ``history`` holds the weighted MSE after initialization and after every
    sweep; it is non-increasing.
    """
    g: list
    bias: float
    residual: float
    weights: np.ndarray = field(repr=False)
    output: Optional[int] = None
    history: list = field(default_factory=list, repr=False)

    @property
    def W(self) -> np.ndarray:
        return outer(self.g)

    def predict(self, Xbar) -> np.ndarray:
        Xbar = np.asarray(Xbar, dtype=np.float64)
        return contract_except(Xbar, self.g, None) + self.bias


@dataclass
class RotationSet:
    R: list
    singular_values: list
    skipped: int = 0


@dataclass
class LrcResult:
    anchor: int
    sigma: float
    weights: np.ndarray = field(repr=False)
    g: list
    bias: float
    g_hat: list
    rotated: list
    original: list


def contract_except(Xbar, g, k):
    """Contract every mode of each sample in ``Xbar`` with ``g[l]`` except mode ``k``.

    ``Xbar`` is ``(N, J_1, ..., J_K)``. Returns ``(N, J_k)``, or ``(N,)`` when
    ``k`` is None.
    """
    out = Xbar
    # contract from the last mode down so earlier axis numbers stay valid
    for l in reversed(range(len(g))):
        if l != k:
            out = np.tensordot(out, g[l], axes=([l + 1], [0]))
    return out


def model_targets(model: TripModel, Xbar, output=None) -> np.ndarray:
    """What the surrogate imitates: one class logit, or the regression output."""
    out = head_output(model, Xbar)
    if model.task == "regression":
        return out
    if output is None:
        output = model.n_outputs - 1
    if not 0 <= output < model.n_outputs:
        raise ValueError(f"output {output} outside [0, {model.n_outputs})")
    return out[:, output]


def _wmse(e, w):
    return float(np.sum(w * e * e) / np.sum(w))


def _solve(A, y, w):
    """Weighted least squares ``argmin sum w (A t - y)^2``; ridge only when singular."""
    Aw = A * w[:, None]
    H = A.T @ Aw
    rhs = Aw.T @ y
    if np.linalg.cond(H) > COND_LIMIT:
        log.info("degenerate normal equations; adding ridge %g", RIDGE)
        H = H + RIDGE * np.eye(len(H))
    return np.linalg.solve(H, rhs)


def _initial_factors(Xbar, y, w):
    """Rank-1 truncation (leading singular vector per mode) of the unconstrained fit."""
    N = len(Xbar)
    shape = Xbar.shape[1:]
    A = np.column_stack([Xbar.reshape(N, -1), np.ones(N)])
    theta = _solve(A, y, w)
    W = theta[:-1].reshape(shape)
    if len(shape) == 1:
        return [W]
    g = []
    for k in range(len(shape)):
        Wk = np.moveaxis(W, k, 0).reshape(shape[k], -1)
        u, _, _ = np.linalg.svd(Wk, full_matrices=False)
        g.append(u[:, 0])
    # scale the first factor to the best fit of W along outer(g)
    T = outer(g)
    g[0] = g[0] * (np.sum(W * T) / max(np.sum(T * T), 1e-300))
    return g


def _gauge(g):
    """Unit norm and nonnegative first entry for modes >= 2; magnitude and sign go to mode 1."""
    g = [v.copy() for v in g]
    for k in range(1, len(g)):
        n = np.linalg.norm(g[k])
        if n == 0:
            continue
        s = -1.0 if g[k][0] < 0 else 1.0
        g[k] *= s / n
        g[0] *= s * n
    return g


def fit_surrogate_projected(Xbar, y, weights=None, output=None) -> SurrogateModel:
    """Weighted ALS on already projected samples ``Xbar`` ``(N, J_1, ..., J_K)``."""
    Xbar = np.asarray(Xbar, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    N = len(Xbar)
    if N == 0 or len(y) != N:
        raise ValueError("need matching non-empty samples and targets")
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (N,) or np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative, one per sample, not all zero")
    K = Xbar.ndim - 1
    ones = np.ones(N)

    if K == 1:
        A = np.column_stack([Xbar, ones])
        theta = _solve(A, y, w)
        err = _wmse(A @ theta - y, w)
        return SurrogateModel([theta[:-1]], float(theta[-1]), err, w, output, [err])

    g = _initial_factors(Xbar, y, w)
    bias = float(np.sum(w * (y - contract_except(Xbar, g, None))) / np.sum(w))
    err = _wmse(contract_except(Xbar, g, None) + bias - y, w)
    history = [err]
    for sweep in range(MAX_SWEEPS):
        for k in range(K):
            A = np.column_stack([contract_except(Xbar, g, k), ones])
            theta = _solve(A, y, w)
            g[k], bias = theta[:-1], float(theta[-1])
        new = _wmse(contract_except(Xbar, g, None) + bias - y, w)
        # each block solve is exact, so only roundoff can raise the objective
        if new > err * (1 + 1e-9) + 1e-15:
            raise SurrogateError(f"ALS objective increased at sweep {sweep + 1}: {err} -> {new}")
        history.append(new)
        done = err - new <= REL_TOL * max(err, 1e-300)
        err = new
        if done:
            break
    g = _gauge(g)
    return SurrogateModel(g, bias, err, w, output, history)


def fit_surrogate(model: TripModel, X, weights=None, output=None) -> SurrogateModel:
    """Fit the rank-1 linear surrogate to ``model``'s outputs on samples ``X``.

    For classification the target is the logit of class ``output`` (default:
    the last class, i.e. the positive class of a binary model).
    """
    batch, _ = as_batch(X, model.input_shape)
    Xbar = project_factors(model.C, batch)
    if model.task == "classification" and output is None:
        output = model.n_outputs - 1
    return fit_surrogate_projected(Xbar, model_targets(model, Xbar, output), weights, output)


def rotation_from_projected(Xbar, g) -> RotationSet:
    """Per mode, left singular vectors of the normalized ``u_n`` stacked as columns."""
    Xbar = np.asarray(Xbar, dtype=np.float64)
    K = Xbar.ndim - 1
    Rs, svals, skipped = [], [], 0
    for k in range(K):
        U = contract_except(Xbar, g, k)
        norms = np.linalg.norm(U, axis=1)
        keep = norms > 0
        if not keep.all():
            skipped += int((~keep).sum())
            log.info("mode %d: %d sample(s) with zero-norm u skipped", k, int((~keep).sum()))
        U = U[keep] / norms[keep, None]
        J = Xbar.shape[k + 1]
        if len(U) < J:
            # zero rows leave U^T U unchanged
            U = np.vstack([U, np.zeros((J - len(U), J))])
        svd = thin_svd(U)
        Rs.append(svd.Q)
        svals.append(svd.S)
    return RotationSet(Rs, svals, skipped)


def rotation(model: TripModel, X, surrogate: SurrogateModel) -> RotationSet:
    batch, _ = as_batch(X, model.input_shape)
    return rotation_from_projected(project_factors(model.C, batch), surrogate.g)


def rotate_projected(Xbar, Rs) -> np.ndarray:
    """Coordinates of projected samples in the rotated bases ``C_k R_k``."""
    out = np.asarray(Xbar, dtype=np.float64)
    for k, R in enumerate(Rs):
        out = np.moveaxis(np.tensordot(out, R, axes=([k + 1], [0])), -1, k + 1)
    return out


def unrotate_projected(Xrot, Rs) -> np.ndarray:
    return rotate_projected(Xrot, [R.T for R in Rs])


def similarity_weights(Xbar, anchor: int, sigma: float) -> np.ndarray:
    """``exp(-||xbar_anchor - xbar_n||^2 / sigma^2)``; the anchor's own weight is exactly 1."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    Xbar = np.asarray(Xbar, dtype=np.float64)
    d2 = np.sum((Xbar - Xbar[anchor]).reshape(len(Xbar), -1) ** 2, axis=1)
    d2[anchor] = 0.0
    w = np.exp(-d2 / sigma ** 2)
    others = np.delete(w, anchor)
    if len(others) and not np.any(others > 0):
        dmin = np.sqrt(np.min(np.delete(d2, anchor)))
        smallest = dmin / np.sqrt(-np.log(np.finfo(float).tiny))
        raise SurrogateError(
            f"sigma={sigma:g} gives zero weight to every other sample; "
            f"use sigma >= {smallest:.6g}")
    return w


def lrc(model: TripModel, X, anchor: int, sigma: float = 1.0, output=None,
        surrogate: Optional[SurrogateModel] = None,
        rotations: Optional[RotationSet] = None) -> LrcResult:
    """Local regression coefficients around sample ``anchor``.

    ``surrogate`` and ``rotations`` default to the global surrogate and its
    rotation on the same samples; pass them in when looping over anchors.
    """
    batch, _ = as_batch(X, model.input_shape)
    Xbar = project_factors(model.C, batch)
    if not 0 <= anchor < len(Xbar):
        raise IndexError(f"anchor {anchor} outside [0, {len(Xbar)})")
    if model.task == "classification" and output is None:
        output = model.n_outputs - 1
    y = model_targets(model, Xbar, output)
    if surrogate is None:
        surrogate = fit_surrogate_projected(Xbar, y, output=output)
    if rotations is None:
        rotations = rotation_from_projected(Xbar, surrogate.g)
    w = similarity_weights(Xbar, anchor, sigma)
    local = fit_surrogate_projected(Xbar, y, w, output)
    K = len(local.g)
    g_hat = []
    for k in range(K):
        scale = np.prod([local.g[l] @ surrogate.g[l] for l in range(K) if l != k])
        g_hat.append(local.g[k] * scale)
    rotated = [R.T @ v for R, v in zip(rotations.R, g_hat)]
    original = [C @ v for C, v in zip(model.C, g_hat)]
    return LrcResult(anchor, sigma, w, local.g, local.bias, g_hat, rotated, original)


def export_decision_grid(model: TripModel, axes: Sequence, bounds: Sequence,
                         resolution=50, rotations: Optional[RotationSet] = None,
                         base=None) -> np.ndarray:
    """Model outputs over a 2-D grid of rotated subspace coordinates.

    ``axes`` names two coordinates of the projected tensor, each a flat index
    into it (or a tuple index). The remaining coordinates are held at ``base``
    (rotated coordinates; zeros by default). Rows are ``(a1, a2, outputs...)``
    with the first axis varying slowest; outputs are class probabilities or
    the regression value.
    """
    shape = model.subspace
    if len(axes) != 2 or len(bounds) != 2:
        raise ValueError("decision grids scan exactly two coordinates")
    flat = [int(np.ravel_multi_index(a, shape)) if isinstance(a, tuple) else int(a)
            for a in axes]
    size = int(np.prod(shape))
    if flat[0] == flat[1] or not all(0 <= a < size for a in flat):
        raise ValueError(f"axes must be two distinct coordinates in [0, {size})")
    res = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    grids = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, res)]
    a1, a2 = np.meshgrid(*grids, indexing="ij")
    base = np.zeros(size) if base is None else np.asarray(base, dtype=np.float64).ravel()
    pts = np.tile(base, (a1.size, 1))
    pts[:, flat[0]] = a1.ravel()
    pts[:, flat[1]] = a2.ravel()
    Xrot = pts.reshape((-1,) + shape)
    Xbar = Xrot if rotations is None else unrotate_projected(Xrot, rotations.R)
    out = predict_projected(model, Xbar)
    out = out.reshape(len(pts), -1)
    return np.column_stack([a1.ravel(), a2.ravel(), out])
