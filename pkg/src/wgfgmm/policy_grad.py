"""Likelihood-ratio estimates of the free-energy objective and its gradients.

For a joint GMM used as a GMR policy, the score of ``log pi(a|s)`` w.r.t. a
component's parameters is the joint-density score weighted by the joint
responsibility minus the state-marginal score weighted by the state
responsibility.  The marginal term only touches the state block.

Gradients w.r.t. covariances are returned as the symmetric matrix ``G``
whose Frobenius product with a symmetric perturbation ``E`` is the
directional derivative, i.e. ``-1/2 (S^-1 - S^-1 r r^T S^-1)`` for a
Gaussian log-density.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import InputError
from .gmm import BlockSplit, Conditioner, Gmm, component_logpdfs, symmetrize

WEIGHT_FLOOR = 1e-8


@dataclass(frozen=True)
class Trajectory:
    """One rollout: per-step states, actions and rewards."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated_early: bool = False
    done_reason: str = "horizon"
    final_state: np.ndarray | None = None

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=float))
        a = np.atleast_2d(np.asarray(self.actions, dtype=float))
        r = np.atleast_1d(np.asarray(self.rewards, dtype=float))
        if s.shape[0] == 0 or s.shape[0] != a.shape[0] or r.shape != (s.shape[0],):
            raise InputError(
                f"trajectory arrays disagree: states {s.shape}, actions {a.shape}, rewards {r.shape}"
            )
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "rewards", r)
        if self.final_state is not None:
            object.__setattr__(self, "final_state", np.asarray(self.final_state, dtype=float))

    @classmethod
    def from_steps(cls, steps: Sequence[tuple], **kwargs) -> "Trajectory":
        states, actions, rewards = zip(*steps)
        return cls(np.array(states), np.array(actions), np.array(rewards), **kwargs)

    def __len__(self) -> int:
        return self.rewards.size

    @property
    def positions(self) -> np.ndarray:
        """States visited after each step (falls back to the states themselves)."""
        if self.final_state is None:
            return self.states
        return np.vstack([self.states[1:], self.final_state])


@dataclass(frozen=True)
class RolloutBatch:
    trajectories: list[Trajectory]
    gamma: float = 0.99
    beta: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.trajectories) == 0:
            raise InputError("a rollout batch needs at least one trajectory")
        if not 0.0 < self.gamma <= 1.0:
            raise InputError("gamma must lie in (0, 1]")
        if self.beta < 0:
            raise InputError("beta must be non-negative")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def joint_samples(self) -> np.ndarray:
        return np.vstack([np.hstack([t.states, t.actions]) for t in self.trajectories])


@dataclass(frozen=True)
class EuclideanGrads:
    d_means: np.ndarray
    d_covs: np.ndarray
    d_weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d_covs", symmetrize(np.asarray(self.d_covs, dtype=float)))


# -- responsibilities and scores -------------------------------------------


def _log_resp(logp: np.ndarray, log_w: np.ndarray) -> np.ndarray:
    lj = logp + log_w
    return lj - logsumexp(lj, axis=1, keepdims=True)


def responsibilities_batch(gmm: Gmm, split: BlockSplit, x: np.ndarray):
    """Joint and state responsibilities for stacked joint samples, each (S, N)."""
    x = np.atleast_2d(x)
    log_w = np.log(np.maximum(gmm.weights, WEIGHT_FLOOR))
    s = split.state_dims
    zj = np.exp(_log_resp(component_logpdfs(x, gmm.means, gmm.covs), log_w))
    zs = np.exp(_log_resp(component_logpdfs(x[:, s], gmm.means[:, s], gmm.covs[:, s, s]), log_w))
    return zj, zs


def responsibilities(gmm: Gmm, split: BlockSplit, s, a):
    """(zeta_joint, zeta_state) for a single state-action pair."""
    x = np.concatenate([np.atleast_1d(s), np.atleast_1d(a)])[None]
    zj, zs = responsibilities_batch(gmm, split, x)
    return zj[0], zs[0]


def score_cores(gmm: Gmm, split: BlockSplit, x: np.ndarray):
    """Per-sample gradients of ``log pi(a|s)`` w.r.t. every component parameter.

    Args:
        gmm: Joint state-action mixture.
        split: State/action layout.
        x: Joint samples ``[s | a]`` of shape (S, d).

    Returns:
        Tuple ``(d_mu, d_sigma, d_omega)`` of shapes (S, N, d), (S, N, d, d)
        and (S, N).
    """
    x = np.atleast_2d(x)
    n_s = split.n_state
    sl = split.state_dims
    zj, zs = responsibilities_batch(gmm, split, x)
    prec = np.linalg.inv(gmm.covs)
    prec = symmetrize(prec)
    prec_s = symmetrize(np.linalg.inv(gmm.covs[:, sl, sl]))

    r = x[:, None, :] - gmm.means[None]  # (S, N, d)
    pr = np.einsum("nij,snj->sni", prec, r)
    rs = r[..., :n_s]
    prs = np.einsum("nij,snj->sni", prec_s, rs)

    d_mu = zj[..., None] * pr
    d_mu[..., :n_s] -= zs[..., None] * prs

    outer = pr[..., :, None] * pr[..., None, :]
    d_sigma = -0.5 * zj[..., None, None] * (prec[None] - outer)
    outer_s = prs[..., :, None] * prs[..., None, :]
    d_sigma[..., :n_s, :n_s] += 0.5 * zs[..., None, None] * (prec_s[None] - outer_s)

    w = np.maximum(gmm.weights, WEIGHT_FLOOR)
    d_omega = (zj - zs) / w
    return d_mu, d_sigma, d_omega


# -- returns ---------------------------------------------------------------


def reward_to_go(traj: Trajectory | np.ndarray, gamma: float) -> np.ndarray:
    """R_t = sum_{t' >= t} gamma^(t'-t) r_t'."""
    r = traj.rewards if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def entropy_augment(batch: RolloutBatch, gmm: Gmm, split: BlockSplit) -> RolloutBatch:
    """Replace rewards by ``r - beta * log pi(a|s)``."""
    if batch.beta == 0:
        return batch
    x = batch.joint_samples()
    n_s = split.n_state
    logp = Conditioner(gmm, split).log_prob(x[:, :n_s], x[:, n_s:])
    bounds = np.cumsum([0] + [len(t) for t in batch.trajectories])
    trajs = [
        replace(t, rewards=t.rewards - batch.beta * logp[lo:hi])
        for t, lo, hi in zip(batch.trajectories, bounds[:-1], bounds[1:])
    ]
    return replace(batch, trajectories=trajs)


def advantages(batch: RolloutBatch, baseline: bool = False, normalize: bool = False) -> np.ndarray:
    """Flattened per-step reward-to-go weights, pre-divided by the batch size.

    With ``baseline`` the across-trajectory mean of R_t (over trajectories
    still running at step t) is subtracted.  With ``normalize`` the result
    is divided by its standard deviation.
    """
    rtg = [reward_to_go(t, batch.gamma) for t in batch.trajectories]
    if baseline:
        horizon = max(r.size for r in rtg)
        total = np.zeros(horizon)
        count = np.zeros(horizon)
        for r in rtg:
            total[: r.size] += r
            count[: r.size] += 1
        mean = total / np.maximum(count, 1)
        rtg = [r - mean[: r.size] for r in rtg]
    flat = np.concatenate(rtg)
    if normalize:
        std = flat.std()
        flat = flat / std if std > 1e-12 else np.zeros_like(flat)
    return flat / len(batch)


def euclidean_grads(
    batch: RolloutBatch,
    gmm: Gmm,
    split: BlockSplit,
    baseline: bool = False,
    normalize: bool = False,
) -> EuclideanGrads:
    """All three gradient blocks of the batch objective.

    Rewards in ``batch`` are used as given; call :func:`entropy_augment`
    first to include the entropy bonus.
    """
    weights = advantages(batch, baseline, normalize)
    d_mu, d_sigma, d_omega = score_cores(gmm, split, batch.joint_samples())
    return EuclideanGrads(
        np.tensordot(weights, d_mu, axes=1),
        np.tensordot(weights, d_sigma, axes=1),
        weights @ d_omega,
    )


def grad_mu(batch, gmm, split, baseline=False, normalize=False) -> np.ndarray:
    return euclidean_grads(batch, gmm, split, baseline, normalize).d_means


def grad_sigma(batch, gmm, split, baseline=False, normalize=False) -> np.ndarray:
    return euclidean_grads(batch, gmm, split, baseline, normalize).d_covs


def grad_omega(batch, gmm, split, baseline=False, normalize=False) -> np.ndarray:
    return euclidean_grads(batch, gmm, split, baseline, normalize).d_weights


def chain_to_eta(d_weights, weights) -> np.ndarray:
    """Pull a weight gradient back through ``weights = softmax(eta)``."""
    d_weights = np.asarray(d_weights, dtype=float)
    weights = np.asarray(weights, dtype=float)
    return weights * (d_weights - weights @ d_weights)


def free_energy_estimate(batch: RolloutBatch, gmm: Gmm, split: BlockSplit) -> float:
    """Mean over trajectories of sum_t gamma^t (r_t - beta log pi(a_t|s_t)).

    ``batch`` holds raw environment rewards.
    """
    aug = entropy_augment(batch, gmm, split)
    total = 0.0
    for t in aug.trajectories:
        total += float(np.sum(aug.gamma ** np.arange(len(t)) * t.rewards))
    return total / len(aug)
