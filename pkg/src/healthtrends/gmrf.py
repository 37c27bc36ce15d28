"""Second-order random walk precision and constrained Gaussian sampling."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg

LOG_LAMBDA_MAX = 15.0


class CholeskyError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Rw2Precision:
    T: int
    P: np.ndarray


def second_difference_matrix(T: int) -> np.ndarray:
    D = np.zeros((T - 2, T))
    idx = np.arange(T - 2)
    D[idx, idx] = 1.0
    D[idx, idx + 1] = -2.0
    D[idx, idx + 2] = 1.0
    return D


def build_rw2_precision(T: int) -> Rw2Precision:
    if T < 3:
        raise ValueError(f"RW2 precision needs T >= 3, got {T}")
    D = second_difference_matrix(T)
    return Rw2Precision(T, D.T @ D)


def constraint_matrix(T: int) -> np.ndarray:
    """Rows: mean-zero contrast and normalized slope-zero contrast."""
    t = np.arange(T, dtype=float)
    tc = t - t.mean()
    return np.vstack([np.full(T, 1.0 / T), tc / np.linalg.norm(tc)])


@lru_cache(maxsize=None)
def _null_basis(T: int):
    A = constraint_matrix(T)
    # orthonormal basis of {u : A u = 0}
    q, _ = np.linalg.qr(np.hstack([A.T, np.eye(T)]))
    V = q[:, 2:T]
    V.setflags(write=False)
    return V


def constrained_basis(T: int) -> np.ndarray:
    """Orthonormal ``T x (T-2)`` basis of vectors with zero mean and zero slope."""
    return _null_basis(T)


def cholesky(Q: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(Q, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise CholeskyError(f"precision matrix is not positive definite: {exc}") from None


def sample_canonical(Q, b, rng, return_logdet=False):
    """Draw from N(Q^-1 b, Q^-1).

    Uses a symmetric diagonal rescaling before the Cholesky factorization so
    badly scaled blocks (polynomial age terms, say) stay well conditioned.
    With ``return_logdet`` also returns ``(log|Q|, b' Q^-1 b)``.
    """
    Q = np.asarray(Q, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.sqrt(np.diag(Q))
    if not np.all(d > 0):
        raise CholeskyError("precision matrix has a nonpositive diagonal")
    Qs = Q / d[:, None] / d[None, :]
    L = cholesky(Qs)
    bs = b / d
    w = linalg.solve_triangular(L, bs, lower=True, check_finite=False)
    z = rng.standard_normal(b.shape[0])
    xs = linalg.solve_triangular(L.T, w + z, lower=False, check_finite=False)
    x = xs / d
    if return_logdet:
        logdet = 2.0 * np.log(np.diag(L)).sum() + 2.0 * np.log(d).sum()
        return x, logdet, float(w @ w)
    return x


def gaussian_log_normalizer(Q, b):
    """Return ``(log|Q|, b' Q^-1 b, mean)`` for the canonical Gaussian (Q, b)."""
    Q = np.asarray(Q, dtype=float)
    d = np.sqrt(np.diag(Q))
    if not np.all(d > 0):
        raise CholeskyError("precision matrix has a nonpositive diagonal")
    L = cholesky(Q / d[:, None] / d[None, :])
    w = linalg.solve_triangular(L, b / d, lower=True, check_finite=False)
    mean = linalg.solve_triangular(L.T, w, lower=False, check_finite=False) / d
    logdet = 2.0 * np.log(np.diag(L)).sum() + 2.0 * np.log(d).sum()
    return logdet, float(w @ w), mean


def sample_constrained_gaussian(Q, m, A, rng):
    """Draw u ~ N(Q^-1 m, Q^-1) conditioned on A u = 0 (conditioning by kriging).

    ``Q`` must be positive definite. An intrinsic precision whose null
    space is the row space of ``A`` may be made definite by adding any
    positive multiple of ``A'A``; that leaves the constrained law unchanged.
    """
    Q = np.asarray(Q, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    L = cholesky(Q)
    mean = linalg.cho_solve((L, True), m, check_finite=False)
    z = rng.standard_normal(Q.shape[0])
    x = mean + linalg.solve_triangular(L.T, z, lower=False, check_finite=False)
    W = linalg.cho_solve((L, True), A.T, check_finite=False)  # Q^-1 A'
    S = A @ W
    u = x - W @ np.linalg.solve(S, A @ x)
    # one refinement pass removes the roundoff left by the correction
    u -= W @ np.linalg.solve(S, A @ u)
    return u


def sample_rw2_conditional(lam, P, data_prec, data_lin, rng):
    """Gibbs draw of one RW2 component given diagonal data information.

    Prior precision ``lam * P`` (intrinsic), plus ``diag(data_prec)``;
    linear term ``data_lin``. The mean/slope constraint is imposed by
    kriging after making the precision definite on the null space.
    """
    T = P.shape[0]
    A = constraint_matrix(T)
    Q = lam * P + np.diag(data_prec)
    Q = Q + max(lam, 1.0) * (A.T @ A)
    return sample_constrained_gaussian(Q, data_lin, A, rng)


def sample_rw2_conditional_batch(lam, P, data_prec, data_lin, rng):
    """Independent draws of ``sample_rw2_conditional`` for each row of ``data_prec``/``data_lin``."""
    data_prec = np.atleast_2d(np.asarray(data_prec, dtype=float))
    data_lin = np.atleast_2d(np.asarray(data_lin, dtype=float))
    q, T = data_prec.shape
    A = constraint_matrix(T)
    base = lam * P + max(lam, 1.0) * (A.T @ A)
    Q = np.broadcast_to(base, (q, T, T)).copy()
    Q[:, np.arange(T), np.arange(T)] += data_prec
    L = np.linalg.cholesky(Q)
    z = rng.standard_normal((q, T))
    x = np.linalg.solve(Q, data_lin[..., None])[..., 0]
    x += np.linalg.solve(np.swapaxes(L, 1, 2), z[..., None])[..., 0]
    W = np.linalg.solve(Q, np.broadcast_to(A.T, (q, T, 2)))
    S = A @ W
    for _ in range(2):  # correction plus one refinement pass
        x -= (W @ np.linalg.solve(S, (x @ A.T)[..., None]))[..., 0]
    return x


def rw2_log_density_kernel(u, lam, P) -> float:
    """((T-2)/2) log lam - (lam/2) u'Pu, the RW2 kernel on the constrained subspace."""
    u = np.asarray(u, dtype=float)
    T = P.shape[0]
    return 0.5 * (T - 2) * np.log(lam) - 0.5 * lam * float(u @ P @ u)


def ols_slope(u) -> float:
    u = np.asarray(u, dtype=float)
    t = np.arange(u.size, dtype=float)
    tc = t - t.mean()
    return float(tc @ u / (tc @ tc))
