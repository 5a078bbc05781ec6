"""Complex Hermitian linear algebra for channel covariance work.

All matrices are dense complex128 numpy arrays. Covariances coming out of
pathloss arithmetic can be a hair indefinite, so the PSD checks allow a
relative slack of 1e-10 of the trace and clip the offending eigenvalues;
anything worse is treated as a caller bug and rejected.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .rng import RngStream

PSD_SLACK = 1e-10


class NumericError(ValueError):
    """A matrix argument violated the contract of a linear-algebra routine."""


def is_hermitian(a: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.all(np.abs(a - a.conj().T) <= tol * max(1.0, np.abs(a).max())))


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor L with L @ L.conj().T == cov for a Hermitian PSD matrix.

    Uses Cholesky when the matrix is numerically PD; otherwise falls back to
    an eigendecomposition square root with eigenvalues in
    [-PSD_SLACK * trace, 0] clipped to zero.
    """
    cov = np.asarray(cov, dtype=complex)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise NumericError(f"covariance must be square, got shape {cov.shape}")
    if not is_hermitian(cov):
        raise NumericError("covariance is not Hermitian")
    tr = float(np.real(np.trace(cov)))
    if tr == 0.0 and np.all(cov == 0):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(cov)
    floor = -PSD_SLACK * max(tr, 0.0)
    if vals.min() < floor:
        raise NumericError(
            f"covariance is not PSD: min eigenvalue {vals.min():.3e} "
            f"< {floor:.3e} (-1e-10 * trace)"
        )
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def sample_complex_gaussian(cov: np.ndarray, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Draw from CN(0, cov) via a precomputed PSD factor.

    Returns shape (N,) for size=None, else (size, N).
    """
    fac = psd_factor(cov)
    n = fac.shape[0]
    if size is None:
        z = rng.complex_normal(n)
        return fac @ z
    z = rng.complex_normal((size, n))
    return z @ fac.conj().T


def hermitian_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for Hermitian positive definite a.

    Rejects indefinite or numerically singular inputs with a
    condition-number diagnostic.
    """
    a = np.asarray(a, dtype=complex)
    if not is_hermitian(a):
        raise NumericError("matrix is not Hermitian")
    try:
        c, low = scipy.linalg.cho_factor(a, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        cond = np.linalg.cond(a)
        raise NumericError(
            f"matrix is not positive definite (cond={cond:.3e}): {exc}"
        ) from exc
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)
