"""Gaussians, Gaussian mixtures, EM fitting and Gaussian mixture regression.

A joint model over ``[state | action]`` is stored as stacked arrays
(``weights`` of shape (N,), ``means`` (N, d), ``covs`` (N, d, d)).  The
same object is used as the joint state-action density and, after
conditioning on a state, as the action policy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import DimensionError, InputError, NotPositiveDefiniteError

LOG_2PI = np.log(2.0 * np.pi)

_SYM_TOL = 1e-12
_JITTER_LEVELS = (1e-9, 1e-8, 1e-7, 1e-6)


def safe_cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``cov``, adding a trace-scaled jitter on failure.

    The jitter is ``eps * trace(cov) / d * I`` for eps in 1e-9..1e-6; if all
    levels fail, :class:`NotPositiveDefiniteError` is raised.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[-1]
    scale = np.trace(cov) / d
    if not np.isfinite(scale) or scale <= 0:
        raise NotPositiveDefiniteError("covariance has non-positive trace")
    eye = np.eye(d)
    for eps in _JITTER_LEVELS:
        try:
            return np.linalg.cholesky(cov + eps * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError("covariance is not positive definite")


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _check_symmetric(cov: np.ndarray) -> np.ndarray:
    scale = 1.0 + np.max(np.abs(cov), initial=0.0)
    if np.max(np.abs(cov - np.swapaxes(cov, -1, -2)), initial=0.0) > 1e-8 * scale:
        raise InputError("covariance matrix is not symmetric")
    return symmetrize(cov)


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal with mean vector and SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionError(f"mean {mean.shape} and cov {cov.shape} disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _check_symmetric(cov))

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class Gmm:
    """Gaussian mixture with simplex weights and stacked component parameters."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covs, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        n, d = mu.shape
        if w.shape != (n,) or cov.shape != (n, d, d):
            raise DimensionError(
                f"weights {w.shape}, means {mu.shape}, covs {cov.shape} disagree"
            )
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InputError("mixture weights must be finite and non-negative")
        total = w.sum()
        if abs(total - 1.0) > 1e-8:
            raise InputError(f"mixture weights sum to {total}, expected 1")
        object.__setattr__(self, "weights", w / total)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", _check_symmetric(cov))

    @classmethod
    def from_components(cls, weights: Sequence[float], components: Sequence[Gaussian]) -> "Gmm":
        if not components:
            raise InputError("a mixture needs at least one component")
        dims = {g.dim for g in components}
        if len(dims) != 1:
            raise DimensionError(f"components have mixed dimensions {sorted(dims)}")
        return cls(
            np.asarray(weights, dtype=float),
            np.stack([g.mean for g in components]),
            np.stack([g.cov for g in components]),
        )

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[Gaussian]:
        return [Gaussian(m, c) for m, c in zip(self.means, self.covs)]

    def replace(self, weights=None, means=None, covs=None) -> "Gmm":
        return Gmm(
            self.weights if weights is None else weights,
            self.means if means is None else means,
            self.covs if covs is None else covs,
        )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "d": self.dim,
            "n": self.n_components,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Gmm":
        try:
            gmm = cls(doc["weights"], doc["means"], doc["covs"])
        except KeyError as exc:
            raise InputError(f"GMM document is missing field {exc}") from None
        if gmm.dim != doc.get("d", gmm.dim) or gmm.n_components != doc.get("n", gmm.n_components):
            raise DimensionError("GMM document header disagrees with its arrays")
        return gmm

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Gmm":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class BlockSplit:
    """Contiguous ``[state | action]`` layout of a joint vector."""

    n_state: int
    n_action: int

    def __post_init__(self):
        if self.n_state < 1 or self.n_action < 1:
            raise InputError("state and action blocks must be non-empty")

    @property
    def dim(self) -> int:
        return self.n_state + self.n_action

    @property
    def state_dims(self) -> slice:
        return slice(0, self.n_state)

    @property
    def action_dims(self) -> slice:
        return slice(self.n_state, self.dim)


# -- densities -------------------------------------------------------------


def _logpdf_chol(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """log N(x; mean, L L^T) for x of shape (..., d)."""
    d = mean.size
    diff = np.reshape(x - mean, (-1, d))
    z = solve_triangular(chol, diff.T, lower=True, check_finite=False)
    maha = np.einsum("ij,ij->j", z, z)
    half_logdet = np.sum(np.log(np.diag(chol)))
    out = -0.5 * (d * LOG_2PI + maha) - half_logdet
    return out.reshape(np.shape(x)[:-1])


def gaussian_logpdf(x, g: Gaussian):
    """Log density of ``g`` at ``x``; ``x`` may be a single point or a stack."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (g.dim,):
        raise DimensionError(f"point of shape {x.shape} for a {g.dim}-d Gaussian")
    out = _logpdf_chol(x, g.mean, safe_cholesky(g.cov))
    return float(out) if out.ndim == 0 else out


def component_logpdfs(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Matrix of per-component log densities, shape (n_points, N)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != means.shape[1]:
        raise DimensionError(f"points of dim {x.shape[1]} for {means.shape[1]}-d components")
    out = np.empty((x.shape[0], means.shape[0]))
    for i, (m, c) in enumerate(zip(means, covs)):
        out[:, i] = _logpdf_chol(x, m, safe_cholesky(c))
    return out


def gmm_logpdf(x, gmm: Gmm):
    """log sum_i w_i N(x; mu_i, Sigma_i), evaluated with log-sum-exp."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    comp = component_logpdfs(x, gmm.means, gmm.covs)
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    out = logsumexp(comp + logw, axis=1)
    return float(out[0]) if single else out


def gmm_sample(gmm: Gmm, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from the mixture: component index first, then the Gaussian variate."""
    n = 1 if size is None else int(size)
    idx = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    z = rng.standard_normal((n, gmm.dim))
    chols = np.stack([safe_cholesky(c) for c in gmm.covs])
    out = gmm.means[idx] + np.einsum("nij,nj->ni", chols[idx], z)
    return out[0] if size is None else out


# -- EM --------------------------------------------------------------------


def _kmeanspp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    for _ in range(1, k):
        d2 = np.min(((data[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(data[rng.integers(len(data))])
        else:
            centers.append(data[rng.choice(len(data), p=d2 / total)])
    return np.asarray(centers)


def em_fit(
    data,
    n_components: int,
    rng: np.random.Generator,
    max_iters: int = 200,
    tol: float = 1e-8,
    reg_covar: float = 0.0,
    min_mass: float = 1e-6,
    return_history: bool = False,
    n_init: int = 1,
):
    """Fit a full-covariance GMM by Expectation-Maximization.

    Means are seeded k-means++ style; every component starts with the data
    covariance and uniform weight.  A component whose responsibility mass
    falls below ``min_mass * n`` is re-seeded at a random data point.

    Args:
        data: Array of shape (n, d).
        n_components: Number of mixture components.
        rng: Random source used for seeding and re-seeding.
        max_iters: Iteration cap.
        tol: Stop once the mean log-likelihood improves by less than this.
        reg_covar: Scalar or per-dimension vector added to every covariance
            diagonal after the M-step.  With ``reg_covar=0`` the likelihood
            sequence is monotone (barring re-seeds).
        min_mass: Relative responsibility floor for re-seeding.
        return_history: Also return the per-iteration mean log-likelihoods.
        n_init: Number of independent initializations; the run with the
            highest final mean log-likelihood is kept.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InputError("EM needs a non-empty (n, d) data array")
    n, d = data.shape
    if n_components < 1 or n < n_components:
        raise InputError(f"cannot fit {n_components} components to {n} points")
    if n_init < 1:
        raise InputError("n_init must be >= 1")
    runs = [_em_run(data, n_components, rng, max_iters, tol, reg_covar, min_mass)
            for _ in range(n_init)]
    gmm, history = max(runs, key=lambda run: run[1][-1])
    return (gmm, history) if return_history else gmm


def _em_run(data, n_components, rng, max_iters, tol, reg_covar, min_mass):
    n, d = data.shape

    reg = np.diag(np.broadcast_to(np.asarray(reg_covar, dtype=float), (d,)))
    data_cov = np.atleast_2d(np.cov(data, rowvar=False, bias=True)) + reg
    if np.trace(data_cov) <= 0:
        data_cov = np.eye(d)
    means = _kmeanspp(data, n_components, rng)
    covs = np.repeat(data_cov[None], n_components, axis=0)
    weights = np.full(n_components, 1.0 / n_components)

    history: list[float] = []
    for _ in range(max_iters):
        log_joint = component_logpdfs(data, means, covs) + np.log(weights)
        log_norm = logsumexp(log_joint, axis=1)
        ll = float(np.mean(log_norm))
        if history and ll - history[-1] < tol:
            history.append(ll)
            break
        history.append(ll)

        resp = np.exp(log_joint - log_norm[:, None])
        mass = resp.sum(axis=0)
        for k in np.flatnonzero(mass < min_mass * n):
            # degenerate component: restart it on a random point
            resp[:, k] = 0.0
            resp[rng.integers(n), k] = 1.0
            mass[k] = 1.0
        weights = mass / mass.sum()
        means = (resp.T @ data) / mass[:, None]
        for k in range(n_components):
            diff = data - means[k]
            if mass[k] <= 1.0 + 1e-12 and np.count_nonzero(resp[:, k]) == 1:
                covs[k] = data_cov
                continue
            covs[k] = symmetrize((resp[:, k, None] * diff).T @ diff / mass[k])
            covs[k] += reg
            try:
                np.linalg.cholesky(covs[k])
            except np.linalg.LinAlgError:
                covs[k] += 1e-9 * max(np.trace(covs[k]) / d, 1e-12) * np.eye(d)

    return Gmm(weights, means, covs), history


# -- marginals and regression ----------------------------------------------


def marginal(gmm: Gmm, split: BlockSplit) -> Gmm:
    """State marginal: same weights, state blocks of means and covariances."""
    if split.dim != gmm.dim:
        raise DimensionError(f"split of dim {split.dim} for a {gmm.dim}-d mixture")
    s = split.state_dims
    return Gmm(gmm.weights, gmm.means[:, s], gmm.covs[:, s, s])


class Conditioner:
    """Precomputed Gaussian mixture regression of actions on states.

    Holds, per component, the regression gain ``Sigma_as Sigma_s^-1``, the
    state-independent conditional covariance and its Cholesky factor, so
    that many states can be conditioned at once.
    """

    def __init__(self, gmm: Gmm, split: BlockSplit):
        if split.dim != gmm.dim:
            raise DimensionError(f"split of dim {split.dim} for a {gmm.dim}-d mixture")
        s, a = split.state_dims, split.action_dims
        self.gmm = gmm
        self.split = split
        self.mu_s = gmm.means[:, s]
        self.mu_a = gmm.means[:, a]
        n = gmm.n_components
        m = split.n_action
        self.gain = np.empty((n, m, split.n_state))
        self.cond_covs = np.empty((n, m, m))
        self.state_chols = np.empty((n, split.n_state, split.n_state))
        for i, cov in enumerate(gmm.covs):
            chol_s = safe_cholesky(cov[s, s])
            self.state_chols[i] = chol_s
            # gain = Sigma_as Sigma_s^{-1}
            tmp = solve_triangular(chol_s, cov[s, a], lower=True)
            self.gain[i] = solve_triangular(chol_s.T, tmp, lower=False).T
            self.cond_covs[i] = symmetrize(cov[a, a] - tmp.T @ tmp)
        self.cond_chols = np.stack([safe_cholesky(c) for c in self.cond_covs])
        with np.errstate(divide="ignore"):
            self.log_w = np.log(gmm.weights)

    def log_weights(self, states: np.ndarray) -> np.ndarray:
        """Log of the state-dependent mixture weights, shape (n_points, N)."""
        states = np.atleast_2d(states)
        lp = np.empty((states.shape[0], self.gmm.n_components))
        for i in range(self.gmm.n_components):
            lp[:, i] = _logpdf_chol(states, self.mu_s[i], self.state_chols[i])
        lp += self.log_w
        return lp - logsumexp(lp, axis=1, keepdims=True)

    def cond_means(self, states: np.ndarray) -> np.ndarray:
        """Conditional action means, shape (n_points, N, m)."""
        states = np.atleast_2d(states)
        diff = states[:, None, :] - self.mu_s[None]
        return self.mu_a[None] + np.einsum("nij,knj->kni", self.gain, diff)

    def condition(self, state) -> Gmm:
        state = np.asarray(state, dtype=float)
        if state.shape != (self.split.n_state,):
            raise DimensionError(f"state of shape {state.shape}, expected ({self.split.n_state},)")
        w = np.exp(self.log_weights(state[None])[0])
        return Gmm(w / w.sum(), self.cond_means(state[None])[0], self.cond_covs)

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """log pi(a | s) for paired rows of ``states`` and ``actions``."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        logw = self.log_weights(states)
        means = self.cond_means(states)
        m = self.split.n_action
        comp = np.empty_like(logw)
        for i in range(self.gmm.n_components):
            chol = self.cond_chols[i]
            z = solve_triangular(chol, (actions - means[:, i]).T, lower=True, check_finite=False)
            comp[:, i] = -0.5 * (m * LOG_2PI + np.einsum("ij,ij->j", z, z)) - np.sum(
                np.log(np.diag(chol))
            )
        return logsumexp(logw + comp, axis=1)

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One action per row of ``states``."""
        states = np.atleast_2d(states)
        k = states.shape[0]
        w = np.exp(self.log_weights(states))
        cdf = np.cumsum(w, axis=1)
        u = rng.random(k) * cdf[:, -1]
        idx = np.minimum((cdf < u[:, None]).sum(axis=1), self.gmm.n_components - 1)
        z = rng.standard_normal((k, self.split.n_action))
        means = self.cond_means(states)[np.arange(k), idx]
        return means + np.einsum("kij,kj->ki", self.cond_chols[idx], z)


def gmr_condition(gmm: Gmm, split: BlockSplit, s) -> Gmm:
    """Action-space mixture pi(a | s) obtained by conditioning the joint GMM."""
    return Conditioner(gmm, split).condition(s)
