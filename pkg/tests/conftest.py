import numpy as np
import pytest
from hypothesis import settings
from scipy.special import logsumexp

from wgfgmm.gmm import BlockSplit, Gmm

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_spd(rng, d, low=0.3, high=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * rng.uniform(low, high, d)) @ q.T


def random_gmm(rng, n, d, spread=2.0, low=0.3, high=2.0):
    weights = rng.dirichlet(np.ones(n))
    means = spread * rng.standard_normal((n, d))
    covs = np.stack([random_spd(rng, d, low, high) for _ in range(n)])
    return Gmm(weights, means, covs)


def _log_gauss(x, means, covs):
    r = x - means
    _, logdet = np.linalg.slogdet(covs)
    maha = np.einsum("...i,...i->...", r, np.linalg.solve(covs, r[..., None])[..., 0])
    return -0.5 * (maha + logdet + x.size * np.log(2 * np.pi))


def log_pi(weights, means, covs, split, x):
    """log pi(a|s) with possibly unnormalized weights, straight from the densities.

    Parameters may carry leading batch axes (..., N, ...); the result then
    has the batch shape.
    """
    x = np.asarray(x, dtype=float).ravel()
    s = split.state_dims
    lw = np.log(weights)
    joint = logsumexp(_log_gauss(x, means, covs) + lw, axis=-1)
    marg = logsumexp(_log_gauss(x[s], means[..., s], covs[..., s, s]) + lw, axis=-1)
    return joint - marg


def fd_scores(gmm, split, x, h=1e-5):
    """Central differences of log_pi for every weight, mean and covariance entry."""
    w, mu, cov = gmm.weights, gmm.means, gmm.covs
    n, d = mu.shape
    dw, dmu, dcov = [], [], []
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        dw.append(e)
        for i in range(d):
            e = np.zeros((n, d))
            e[l, i] = h
            dmu.append(e)
            for j in range(i + 1):
                e = np.zeros((n, d, d))
                e[l, i, j] = e[l, j, i] = h
                dcov.append(e)
    dw, dmu, dcov = np.array(dw), np.array(dmu), np.array(dcov)

    def diff(ws, mus, covs):
        return (log_pi(w + ws, mu + mus, cov + covs, split, x)
                - log_pi(w - ws, mu - mus, cov - covs, split, x)) / (2 * h)

    g_w = diff(dw, 0.0, 0.0)
    g_mu = diff(0.0, dmu, 0.0)
    g_cov = diff(0.0, 0.0, dcov)
    d_mu = g_mu.reshape(n, d)
    d_cov = np.zeros((n, d, d))
    k = 0
    for l in range(n):
        for i in range(d):
            for j in range(i + 1):
                # a symmetric off-diagonal perturbation moves two entries
                d_cov[l, i, j] = d_cov[l, j, i] = g_cov[k] if i == j else g_cov[k] / 2
                k += 1
    return d_mu, d_cov, g_w


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def split22():
    return BlockSplit(2, 2)


# one summary line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
