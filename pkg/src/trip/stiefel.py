"""Orthonormal reparameterization ``C = P Q^T`` of a latent matrix ``Z = P S Q^T``.

The projection matrices are never updated directly. An unconstrained latent
matrix ``Z`` is optimized instead and mapped to its polar factor; gradients
with respect to ``C`` are pulled back to ``Z`` by :func:`manifold_grad`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

log = logging.getLogger(__name__)

SWEEP_CAP = 100
OFF_TOL = 1e-12
DENOM_FLOOR = 1e-10
RANK_TOL = 1e-8
JITTER_SCALE = 1e-6
JITTER_RETRIES = 3
TINY = np.finfo(np.float64).tiny


class SvdConvergenceError(RuntimeError):
    pass


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SvdFactors:
    """Thin SVD ``m = P @ diag(S) @ Q.T`` with ``S`` descending."""

    P: np.ndarray
    S: np.ndarray
    Q: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.P * self.S) @ self.Q.T


@dataclass(frozen=True, eq=False)
class LatentFactor:
    """Latent matrix ``Z``, its SVD and the orthonormal projection ``C``."""

    Z: np.ndarray
    svd: SvdFactors
    C: np.ndarray

    @property
    def shape(self):
        return self.Z.shape


@lru_cache(maxsize=None)
def _rounds(n):
    """Round-robin schedule: each round is a set of disjoint column pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = sorted((min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0)
        p = np.array([a for a, _ in pairs], dtype=np.intp)
        q = np.array([b for _, b in pairs], dtype=np.intp)
        if len(p):
            rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _fix_signs(P, Q):
    # largest-magnitude entry of each right singular vector made positive;
    # argmax returns the lowest row index among ties
    rows = np.argmax(np.abs(Q), axis=0)
    flip = Q[rows, np.arange(Q.shape[1])] < 0
    P[:, flip] *= -1
    Q[:, flip] *= -1


def _complete_basis(P, zero):
    """Replace columns flagged in ``zero`` by unit vectors orthogonal to the rest."""
    I = P.shape[0]
    for j in np.flatnonzero(zero):
        keep = np.ones(P.shape[1], dtype=bool)
        keep[zero] = False
        keep[:j] = True
        keep[j] = False
        basis = P[:, keep]
        for e in range(I):
            v = np.zeros(I)
            v[e] = 1.0
            v -= basis @ (basis.T @ v)
            v -= basis @ (basis.T @ v)
            n = np.linalg.norm(v)
            if n > 0.5:
                P[:, j] = v / n
                break
        zero = zero.copy()
        zero[j] = False
    return P


def thin_svd(m: np.ndarray) -> SvdFactors:
    """Thin SVD of an ``I x J`` matrix (``I >= J``) by one-sided Jacobi rotations.

    Column pairs are rotated until every pair is orthogonal to a relative
    tolerance of 1e-12. The result is deterministic: singular values are
    sorted descending and each right singular vector has its largest-magnitude
    entry positive. Tall inputs are first reduced by a QR factorization so the
    rotations act on the small ``J x J`` triangular factor.
    """
    A = np.array(m, dtype=np.float64, copy=True)
    if A.ndim != 2:
        raise ValueError("thin_svd expects a matrix")
    I, J = A.shape
    if I < J:
        raise ValueError(f"thin_svd needs rows >= cols, got {A.shape}")
    if I > J:
        # A = Qr R and R = P S V' give A = (Qr P) S V'
        Qr, R = np.linalg.qr(A)
        small = _jacobi_svd(R)
        return SvdFactors(Qr @ small.P, small.S, small.Q)
    return _jacobi_svd(A)


def _jacobi_svd(A: np.ndarray) -> SvdFactors:
    I, J = A.shape
    V = np.eye(J)
    rounds = _rounds(J)
    for _ in range(SWEEP_CAP):
        worst = 0.0
        for p, q in rounds:
            ap, aq = A[:, p], A[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            # zero columns have gamma == 0 and count as orthogonal
            rel = np.abs(gamma) / (np.sqrt(alpha * beta) + TINY)
            top = rel.max()
            if top <= OFF_TOL:
                continue
            worst = max(worst, top)
            act = rel > OFF_TOL
            zeta = (beta - alpha) / (2.0 * np.where(act, gamma, 1.0))
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[~act] = 0.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            vp, vq = V[:, p], V[:, q]
            A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
            V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if worst <= OFF_TOL:
            break
    else:
        raise SvdConvergenceError(f"Jacobi SVD did not converge in {SWEEP_CAP} sweeps")

    S = np.sqrt(np.einsum("ij,ij->j", A, A))
    order = np.argsort(-S, kind="stable")
    A, S, V = A[:, order], S[order], V[:, order]
    zero = S <= S[0] * 1e-15 if S[0] > 0 else np.ones(J, dtype=bool)
    P = A / np.where(zero, 1.0, S)
    S = np.where(zero, 0.0, S)
    if zero.any():
        P = _complete_basis(P, zero)
    _fix_signs(P, V)
    return SvdFactors(P, S, V)


def orthonormalize(Z: np.ndarray, rng: np.random.Generator | None = None) -> LatentFactor:
    """Map ``Z`` to its nearest matrix with orthonormal columns.

    If the smallest singular value falls below 1e-8, ``Z`` is perturbed by
    Gaussian noise of scale 1e-6 and retried; the returned factor carries the
    perturbed ``Z``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    for attempt in range(JITTER_RETRIES + 1):
        svd = thin_svd(Z)
        if svd.S[-1] >= RANK_TOL:
            return LatentFactor(Z, svd, svd.P @ svd.Q.T)
        if attempt == JITTER_RETRIES:
            break
        log.warning("latent matrix nearly rank deficient (min singular value %.3g); "
                    "adding jitter", svd.S[-1])
        rng = rng if rng is not None else np.random.default_rng(0)
        Z = Z + JITTER_SCALE * rng.standard_normal(Z.shape)
    raise RankDeficientError(f"latent matrix of shape {Z.shape} is rank deficient")


def manifold_grad(dE_dC: np.ndarray, factor: LatentFactor) -> np.ndarray:
    """Pull a gradient with respect to ``C`` back to the latent ``Z``.

    Returns ``P [(P'AQ - Q'A'P) / (s_i + s_j)] Q' + (I - PP') A Q S^-1 Q'``
    with ``A = dE/dC``. The map is self-adjoint, so the same function also
    gives the directional derivative of ``C`` along a perturbation of ``Z``.
    """
    A = np.asarray(dE_dC, dtype=np.float64)
    P, S, Q = factor.svd.P, factor.svd.S, factor.svd.Q
    if A.shape != P.shape:
        raise ValueError(f"gradient shape {A.shape} does not match factor {P.shape}")
    if S[-1] < DENOM_FLOOR:
        log.warning("singular value %.3g below %.0e; clamping", S[-1], DENOM_FLOOR)
    AQ = A @ Q
    M = P.T @ AQ
    denom = np.maximum(S[:, None] + S[None, :], DENOM_FLOOR)
    inner = (M - M.T) / denom
    outer = (AQ - P @ M) / np.maximum(S, DENOM_FLOOR)
    return (P @ inner + outer) @ Q.T


def random_latent(shape, rng: np.random.Generator) -> np.ndarray:
    """Initial latent matrix with i.i.d. N(0, 1/I) entries."""
    I, J = shape
    return rng.normal(0.0, 1.0 / np.sqrt(I), size=(I, J))
