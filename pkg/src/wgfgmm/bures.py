"""Bures-Wasserstein geometry of Gaussians.

SPD matrix functions go through a symmetric eigendecomposition; the
dimensions used here are tiny (d <= 6), so exactness wins over the speed
of iterative schemes.

Lyapunov convention: ``lyap_solve(A, B)`` returns the symmetric ``L`` with
``L A + A L = B``.  The retraction at ``Sigma`` along a symmetric ``X`` is
``Sigma + X + L Sigma L`` with ``L = lyap_solve(Sigma, X)``, which equals
``(I + L) Sigma (I + L)``.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NotPositiveDefiniteError, NumericError, StepTooLargeError
from .gmm import Gaussian, symmetrize

W2_NEG_TOL = 1e-7


def _eigh_spd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"expected square matrices, got {a.shape}")
    lam, u = np.linalg.eigh(symmetrize(a))
    if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
        raise NotPositiveDefiniteError("matrix is not positive definite")
    return lam, u


def spd_sqrt(a: np.ndarray) -> np.ndarray:
    """Principal square root of an SPD matrix (or a stack of them)."""
    lam, u = _eigh_spd(a)
    return symmetrize((u * np.sqrt(lam)[..., None, :]) @ np.swapaxes(u, -1, -2))


def lyap_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``L A + A L = B`` for symmetric ``L`` given SPD ``A``."""
    lam, u = _eigh_spd(a)
    b = np.asarray(b, dtype=float)
    if b.shape != np.shape(a):
        raise DimensionError(f"A {np.shape(a)} and B {b.shape} disagree")
    ut = np.swapaxes(u, -1, -2)
    bt = ut @ b @ u
    lt = bt / (lam[..., :, None] + lam[..., None, :])
    return symmetrize(u @ lt @ ut)


def _trace_sqrt_products(sqrt1: np.ndarray, cov2: np.ndarray) -> np.ndarray:
    """tr (S1 Sigma2 S1)^{1/2} for stacks of S1 = Sigma1^{1/2} and Sigma2."""
    inner = symmetrize(sqrt1 @ cov2 @ sqrt1)
    lam = np.linalg.eigvalsh(inner)
    return np.sqrt(np.clip(lam, 0.0, None)).sum(axis=-1)


def _clamp_w2(val, scale):
    val = np.asarray(val, dtype=float)
    tol = W2_NEG_TOL * np.maximum(1.0, scale)
    if np.any(val < -tol):
        raise NumericError(f"squared W2 evaluated to {val.min():.3e}")
    return np.where(val < 0, 0.0, val)


def w2_gaussian_sq(g1: Gaussian, g2: Gaussian) -> float:
    """Squared 2-Wasserstein distance between two Gaussians (closed form)."""
    if g1.dim != g2.dim:
        raise DimensionError(f"Gaussians of dims {g1.dim} and {g2.dim}")
    dm = g1.mean - g2.mean
    tr12 = np.trace(g1.cov) + np.trace(g2.cov)
    cross = _trace_sqrt_products(spd_sqrt(g1.cov), g2.cov)
    return float(_clamp_w2(dm @ dm + tr12 - 2.0 * cross, tr12))


def w2_gaussian_sq_matrix(means1, covs1, means2, covs2) -> np.ndarray:
    """All pairwise squared W2 distances between two stacks of Gaussians."""
    means1, means2 = np.atleast_2d(means1), np.atleast_2d(means2)
    if means1.shape[1] != means2.shape[1]:
        raise DimensionError(f"Gaussians of dims {means1.shape[1]} and {means2.shape[1]}")
    sq1 = spd_sqrt(covs1)
    mean_term = ((means1[:, None, :] - means2[None, :, :]) ** 2).sum(-1)
    tr1 = np.trace(covs1, axis1=1, axis2=2)
    tr2 = np.trace(covs2, axis1=1, axis2=2)
    cross = _trace_sqrt_products(sq1[:, None], covs2[None])
    tr12 = tr1[:, None] + tr2[None, :]
    return _clamp_w2(mean_term + tr12 - 2.0 * cross, tr12)


def bw_grad(egrad_cov: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Riemannian gradient ``4 sym(G Sigma)`` from the Euclidean gradient ``G``."""
    return 4.0 * symmetrize(np.asarray(egrad_cov) @ np.asarray(sigma))


def bw_retract(sigma: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Map the tangent vector ``x`` at ``sigma`` back onto the SPD cone.

    Raises:
        StepTooLargeError: the result is not numerically positive definite.
    """
    sigma = np.asarray(sigma, dtype=float)
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        return sigma.copy()
    lyap = lyap_solve(sigma, x)
    out = symmetrize(sigma + x + lyap @ sigma @ lyap)
    if not np.all(np.isfinite(out)):
        raise StepTooLargeError("retraction produced non-finite entries")
    try:
        np.linalg.cholesky(out)
    except np.linalg.LinAlgError:
        raise StepTooLargeError("retraction left the SPD cone") from None
    lam_min = np.linalg.eigvalsh(out)[0]
    if lam_min <= 1e-12 * max(1.0, np.trace(out)):
        raise StepTooLargeError("retraction is numerically singular")
    return out
