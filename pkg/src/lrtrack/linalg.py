"""Thin SVD by one-sided Jacobi rotations, plus the energy-based rank rule.

Only the singular values and right singular vectors are produced; the left
factor is never needed downstream.  Nothing here is differentiated: callers
treat every output as a constant.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np

from .tensor import count_macs

log = logging.getLogger(__name__)

OFF_DIAG_TOL = 1e-12
MAX_SWEEPS = 30
NEGLIGIBLE = 8 * np.finfo(np.float64).eps


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(f"one-sided Jacobi did not converge in {sweeps} sweeps (off-diagonal {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps


@dataclass(frozen=True)
class SingularSpectrum:
    values: np.ndarray  # (min(N, C),) descending
    right_basis: np.ndarray  # (C, C); row i is the i-th right singular vector
    sweeps: int = 0

    @property
    def energy(self) -> np.ndarray:
        return self.values**2


@dataclass(frozen=True)
class RankEstimate:
    k: int
    retained: float  # fraction of energy kept by the first k components
    clamped: bool = False
    degenerate: bool = False


@numba.njit(cache=True)
def _jacobi_columns(G, V, tol, max_sweeps):
    n_rows, n = G.shape
    # columns at round-off level relative to the whole matrix are treated as
    # null: their correlation with anything is noise
    floor = (NEGLIGIBLE * max(n_rows, n)) ** 2 * np.sum(G * G)
    off = 0.0
    macs = 0
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                macs += 3 * n_rows
                for r in range(n_rows):
                    gi = G[r, i]
                    gj = G[r, j]
                    alpha += gi * gi
                    beta += gj * gj
                    gamma += gi * gj
                if alpha <= floor or beta <= floor or gamma == 0.0:
                    continue
                corr = abs(gamma) / np.sqrt(alpha * beta)
                if corr > off:
                    off = corr
                if corr < tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                macs += 4 * (n_rows + n)
                for r in range(n_rows):
                    gi = G[r, i]
                    gj = G[r, j]
                    G[r, i] = c * gi - s * gj
                    G[r, j] = s * gi + c * gj
                for r in range(n):
                    vi = V[r, i]
                    vj = V[r, j]
                    V[r, i] = c * vi - s * vj
                    V[r, j] = s * vi + c * vj
        if off < tol:
            return sweep + 1, off, macs
    return -1, off, macs


def svd_thin(X, tol: float = OFF_DIAG_TOL, max_sweeps: int = MAX_SWEEPS) -> SingularSpectrum:
    """Singular values and right singular vectors of an N x C matrix.

    Tall inputs are first reduced to their C x C triangular factor, which has
    the same singular values and right vectors, so the rotations run on a
    small square matrix.

    Sign convention: the first entry of each right vector with magnitude
    above 1e-12 is nonnegative.  Equal singular values are ordered by the
    lexicographic order of their vectors.
    """
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"svd_thin needs a non-empty matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("svd_thin: input contains non-finite values")
    n_rows, n = X.shape
    G = np.linalg.qr(X, mode="r") if n_rows > n else X
    G = np.array(G, dtype=np.float64, order="C")
    V = np.eye(n)
    # Householder QR costs about N*C^2 - C^3/3 multiply-accumulates
    count_macs(n_rows * n * n - n**3 // 3 if n_rows > n else 0)
    sweeps, off, macs = _jacobi_columns(G, V, tol, max_sweeps)
    count_macs(int(macs) + G.size)
    if sweeps < 0:
        raise ConvergenceError(off, max_sweeps)

    sigma = np.sqrt(np.einsum("ij,ij->j", G, G))
    basis = V.T.copy()
    for row in basis:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    order = sorted(range(n), key=lambda i: (-sigma[i], tuple(basis[i])))
    sigma = sigma[order]
    basis = basis[order]
    return SingularSpectrum(values=sigma[: min(n_rows, n)], right_basis=basis, sweeps=sweeps)


def effective_rank(spectrum, tau: float, limit: int | None = None) -> RankEstimate:
    """Smallest K whose leading squared singular values reach ``tau`` of the total.

    ``limit`` (the query-pool size) caps K; the cap is reported when it
    fires.  An all-zero spectrum yields K = 1 flagged as degenerate.
    """
    values = spectrum.values if isinstance(spectrum, SingularSpectrum) else np.asarray(spectrum, dtype=float)
    if values.size == 0:
        raise ValueError("effective_rank: empty spectrum")
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"effective_rank: tau must lie in (0, 1], got {tau}")
    energy = values.astype(np.float64) ** 2
    total = float(energy.sum())
    if total <= 0.0:
        return RankEstimate(k=1, retained=1.0, degenerate=True)
    # compare the discarded tail rather than the kept prefix: tiny trailing
    # values stay visible and tau = 1 means "nothing nonzero is dropped"
    tail = np.concatenate([np.cumsum(energy[::-1])[::-1][1:], [0.0]])
    k = int(np.flatnonzero(tail <= (1.0 - tau) * total)[0]) + 1
    cum = np.cumsum(energy)
    clamped = False
    if limit is not None and k > limit:
        log.warning("effective rank %d exceeds query pool size %d; clamping", k, limit)
        k, clamped = limit, True
    return RankEstimate(k=k, retained=float(cum[k - 1] / total), clamped=clamped)


def truncation_residual(X, spectrum: SingularSpectrum, k: int) -> float:
    """Squared Frobenius error of the rank-k truncation, measured directly."""
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    kmax = min(X.shape)
    if not 1 <= k <= kmax:
        raise ValueError(f"truncation_residual: k={k} outside [1, {kmax}]")
    Vk = spectrum.right_basis[:k].T
    resid = X - (X @ Vk) @ Vk.T
    return float(np.sum(resid * resid))
