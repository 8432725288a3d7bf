"""Dense linear-algebra primitives shared by the rest of the pipeline."""

import numpy as np
from scipy.linalg import solve_triangular


class NotPositiveDefinite(Exception):
    """Covariance stayed non-PD even after regularization."""


class DimensionMismatch(Exception):
    pass


class TooFewSamples(Exception):
    pass


def regularized_inverse(sigma, eps0=1e-4):
    """Invert a symmetric matrix via Cholesky after adding eps0 on the diagonal.

    Returns (sigma + eps0*I)^-1 computed as (L^-1)^T L^-1 with
    sigma + eps0*I = L L^T.  Raises NotPositiveDefinite if the
    factorization fails.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got {sigma.shape}")
    scale = max(1.0, float(np.max(np.abs(sigma))))
    if np.max(np.abs(sigma - sigma.T)) > 1e-10 * scale:
        raise DimensionMismatch("matrix is not symmetric")
    # symmetrize to kill float asymmetry before factorizing
    sym = 0.5 * (sigma + sigma.T) + eps0 * np.eye(sigma.shape[0])
    try:
        lower = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    linv = solve_triangular(lower, np.eye(sigma.shape[0]), lower=True)
    inv = linv.T @ linv
    return 0.5 * (inv + inv.T)


def mahalanobis_sq(x, mu, sigma_inv):
    """Squared Mahalanobis distance (x-mu) sigma_inv (x-mu)^T, no square root."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma_inv = np.asarray(sigma_inv, dtype=float)
    if x.shape != mu.shape or sigma_inv.shape != (x.size, x.size):
        raise DimensionMismatch(
            f"x {x.shape}, mu {mu.shape}, sigma_inv {sigma_inv.shape}")
    d = x - mu
    return max(0.0, float(d @ sigma_inv @ d))


def sample_covariance(f):
    """Unbiased (n-1) sample covariance of the rows of an n x s matrix."""
    f = np.asarray(f, dtype=float)
    if f.ndim != 2:
        raise DimensionMismatch(f"expected 2-d array, got shape {f.shape}")
    n = f.shape[0]
    if n < 2:
        raise TooFewSamples(f"need at least 2 rows, got {n}")
    centered = f - f.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    return 0.5 * (cov + cov.T)


def column_softmax(m):
    """Column-wise softmax with per-column max subtraction."""
    m = np.asarray(m, dtype=float)
    shifted = m - m.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)
