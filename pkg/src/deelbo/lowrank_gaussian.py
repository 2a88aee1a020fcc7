"""Low-rank-plus-diagonal covariance algebra.

The matrix represented by :class:`LowRankCov` is

    Sigma = 0.5 * diag(d) + Q Q^T / (2K - 2)

which is the SWAG covariance ``(Sigma_diag + Sigma_LR) / 2`` with
``Sigma_LR = Q Q^T / (K - 1)``. Everything here runs in O(D K^2 + K^3) time
through the Woodbury identity and the matrix determinant lemma; no D x D
array is ever allocated.

Woodbury factor naming: ``A = diag(d) / 2`` and ``U = Q / sqrt(2K - 2)``,
so ``Sigma = A + U U^T``. The right factor is just ``U^T``; we avoid calling
it ``V`` since that name belongs to the classifier head elsewhere.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from deelbo.errors import InvalidCovarianceError, NumericalDegeneracyError, ShapeError


class LowRankCov:
    """Immutable ``A + U U^T`` covariance with cached trace-inverse and logdet.

    Parameters
    ----------
    diag : array_like, shape (D,)
        Entries of ``Sigma_diag``; all strictly positive.
    Q : array_like, shape (D, K)
        Deviation columns, ``K >= 2``.
    """

    def __init__(self, diag, Q):
        diag = np.array(diag, dtype=np.float64)
        Q = np.array(Q, dtype=np.float64)
        if diag.ndim != 1:
            raise ShapeError(f"diag must be a vector, got shape {diag.shape}")
        if Q.ndim != 2 or Q.shape[0] != diag.shape[0]:
            raise ShapeError(f"Q must have shape ({diag.shape[0]}, K), got {Q.shape}")
        if Q.shape[1] < 2:
            raise InvalidCovarianceError(f"rank K must be >= 2, got K={Q.shape[1]}")
        if not np.all(np.isfinite(diag)) or not np.all(np.isfinite(Q)):
            raise InvalidCovarianceError("covariance factors contain non-finite entries")
        if np.any(diag <= 0.0):
            bad = int(np.flatnonzero(diag <= 0.0)[0])
            raise InvalidCovarianceError(
                f"diag entries must be strictly positive (index {bad} is {diag[bad]!r})"
            )
        diag.setflags(write=False)
        Q.setflags(write=False)
        self._diag = diag
        self._Q = Q

        K = Q.shape[1]
        self._a = 0.5 * diag
        self._a_inv = 1.0 / self._a
        self._U = Q / np.sqrt(2.0 * K - 2.0)
        self._a_inv_U = self._a_inv[:, None] * self._U
        # inner = C^{-1} + U^T A^{-1} U with C = I_K
        inner = np.eye(K) + self._U.T @ self._a_inv_U
        self._chol = _cholesky(inner)

        # Tr((inner)^{-1} U^T A^{-2} U) via the cyclic property
        a_inv_sq_U = self._a_inv[:, None] * self._a_inv_U
        correction = np.trace(_cho_solve(self._chol, self._U.T @ a_inv_sq_U))
        self._trace_inv = float(np.sum(self._a_inv) - correction)
        self._logdet = float(2.0 * np.sum(np.log(np.diag(self._chol))) + np.sum(np.log(self._a)))
        for arr in (self._a, self._a_inv, self._U, self._a_inv_U, self._chol):
            arr.setflags(write=False)

    @property
    def diag(self):
        return self._diag

    @property
    def Q(self):
        return self._Q

    @property
    def K(self):
        return self._Q.shape[1]

    @property
    def dim(self):
        return self._diag.shape[0]

    @property
    def cached_trace_inv(self):
        return self._trace_inv

    @property
    def cached_logdet(self):
        return self._logdet

    def trace_inverse(self):
        return self._trace_inv

    def logdet(self):
        return self._logdet

    def solve(self, delta):
        """Return ``Sigma^{-1} delta`` using matrix-vector products only."""
        delta = self._check(delta)
        a_inv_delta = self._a_inv * delta
        inner_rhs = self._U.T @ a_inv_delta
        return a_inv_delta - self._a_inv_U @ _cho_solve(self._chol, inner_rhs)

    def mahalanobis_sq(self, delta):
        delta = self._check(delta)
        a_inv_delta = self._a_inv * delta
        inner_rhs = self._U.T @ a_inv_delta
        value = float(delta @ a_inv_delta - inner_rhs @ _cho_solve(self._chol, inner_rhs))
        # cancellation can leave a tiny negative residue
        return max(value, 0.0)

    def to_dense(self):
        """Materialize the D x D matrix. Intended for tests and small D only."""
        return np.diag(self._a) + self._U @ self._U.T

    def _check(self, delta):
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != self._diag.shape:
            raise ShapeError(f"delta must have shape {self._diag.shape}, got {delta.shape}")
        return delta

    def __repr__(self):
        return f"LowRankCov(D={self.dim}, K={self.K})"


class IdentityCov:
    """The D x D identity, with the same interface as :class:`LowRankCov`."""

    def __init__(self, dim):
        if dim < 1:
            raise ShapeError(f"dimension must be positive, got {dim}")
        self._dim = int(dim)

    @property
    def dim(self):
        return self._dim

    def trace_inverse(self):
        return float(self._dim)

    def logdet(self):
        return 0.0

    def solve(self, delta):
        return np.array(self._check(delta), dtype=np.float64)

    def mahalanobis_sq(self, delta):
        delta = self._check(delta)
        return float(delta @ delta)

    def to_dense(self):
        return np.eye(self._dim)

    def _check(self, delta):
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (self._dim,):
            raise ShapeError(f"delta must have shape ({self._dim},), got {delta.shape}")
        return delta

    def __repr__(self):
        return f"IdentityCov(D={self._dim})"


def trace_inverse(cov):
    """``Tr(Sigma^{-1})``."""
    return cov.trace_inverse()


def mahalanobis_sq(cov, delta):
    """``delta^T Sigma^{-1} delta``."""
    return cov.mahalanobis_sq(delta)


def logdet(cov):
    """``log det Sigma``."""
    return cov.logdet()


def _cholesky(mat):
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise NumericalDegeneracyError(
            "inner K x K system is not positive definite"
        ) from exc
    if not np.all(np.isfinite(chol)) or np.any(np.diag(chol) <= 0.0):
        raise NumericalDegeneracyError("non-positive pivot in inner K x K factorization")
    return chol


def _cho_solve(chol, rhs):
    y = solve_triangular(chol, rhs, lower=True)
    return solve_triangular(chol.T, y, lower=False)
