"""Alternating Wasserstein-gradient-flow optimizer for GMM policies.

Each outer iteration collects a batch of rollouts, then alternates

* Gaussian steps: Riemannian ascent on the product of Bures-Wasserstein
  manifolds (means by vector addition, covariances by the BW retraction),
  with the step size chosen by a backtracking search that keeps the
  mixture W2 to the batch's reference policy below ``c_max``;
* weight steps: gradient descent on the softmax logits ``eta`` for
  ``W2^2(pi(eta), pi_ref) / tau - J(pi(eta))``, the W2 part coming from
  Sinkhorn duals.

``mode="cholesky_ablation"`` replaces the Gaussian step by Euclidean
descent on (mean, Cholesky factor) for ``W2^2 / (2 tau) - J``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .bures import bw_grad, bw_retract, w2_gaussian_sq_matrix
from .env import TaskSpec, rollout, success_rate
from .errors import InputError, NumericError, StepTooLargeError
from .gmm import BlockSplit, Gmm
from .ot import (
    cost_matrix,
    epsilon_schedule,
    exact_ot_lp,
    grad_w2_weights,
    sinkhorn,
    sinkhorn_annealed,
    w2_gmm_sq,
)
from .policy_grad import (
    RolloutBatch,
    chain_to_eta,
    entropy_augment,
    euclidean_grads,
    free_energy_estimate,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ("outer_iter", "env_steps", "J_estimate", "success_rate", "w2_drift", "wallclock_s")
MODES = ("riemannian", "cholesky_ablation")


@dataclass(frozen=True)
class OptimizerConfig:
    tau: float = 1.0
    lambda0: float = 0.1
    alpha: float = 0.5
    lambda_min: float = 1e-6
    c_max: float = 0.1
    w2_trust_radius: float = 0.4
    beta: float = 1e-3
    gamma: float = 0.99
    episodes_per_iter: int = 10
    inner_gauss_iters: int = 10
    inner_weight_iters: int = 10
    weight_lr: float = 0.05
    mode: str = "riemannian"
    baseline: bool = True
    normalize_advantages: bool = True
    max_rounds: int = 1
    inner_rel_tol: float = 1e-4
    inner_patience: int = 3
    ablation_fd_step: float = 1e-5

    def __post_init__(self):
        positive = ("tau", "lambda0", "lambda_min", "c_max", "w2_trust_radius", "weight_lr")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise InputError("gamma must lie in (0, 1]")
        if self.beta < 0:
            raise InputError("beta must be non-negative")
        if self.episodes_per_iter < 1 or self.max_rounds < 1:
            raise InputError("episode and round counts must be >= 1")
        if self.inner_gauss_iters < 0 or self.inner_weight_iters < 0:
            raise InputError("inner iteration caps must be >= 0")
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "OptimizerConfig":
        return cls(**doc)


def softmax(eta: np.ndarray) -> np.ndarray:
    z = np.exp(eta - eta.max())
    return z / z.sum()


@dataclass(frozen=True)
class OptimizerState:
    policy: Gmm
    eta: np.ndarray
    reference_policy: Gmm
    gauss_steps: int = 0
    weight_steps: int = 0
    last_step: float = 0.0
    moved: bool = False
    duals: tuple | None = field(default=None, repr=False, compare=False)
    j_grad_eta: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def start(cls, policy: Gmm, reference: Gmm | None = None) -> "OptimizerState":
        eta = np.log(np.maximum(policy.weights, 1e-300))
        eta = eta - eta.mean()
        return cls(policy, eta, policy if reference is None else reference)


# -- line search -----------------------------------------------------------


def _add(x0, d, lam):
    return x0 + lam * d


def constrained_line_search(
    x0,
    d,
    cfg: OptimizerConfig,
    constraint: Callable,
    step_fn: Callable = _add,
):
    """Backtracking search on the step size under ``constraint(x0, x) <= c_max``.

    Starting from ``lambda0`` the step shrinks by ``alpha`` while the
    constraint is violated and the step exceeds ``lambda_min``.  If the
    step fell below ``lambda_min`` the start point is returned unchanged
    together with ``lambda0``.  A ``StepTooLargeError`` from ``step_fn``
    counts as a violated constraint.

    Returns:
        Tuple ``(step, x)``.
    """

    def evaluate(lam):
        try:
            x = step_fn(x0, d, lam)
        except StepTooLargeError:
            return None, np.inf
        return x, constraint(x0, x)

    lam = cfg.lambda0
    x, c = evaluate(lam)
    while c > cfg.c_max and lam > cfg.lambda_min:
        lam = cfg.alpha * lam
        x, c = evaluate(lam)
    if lam < cfg.lambda_min or x is None:
        return cfg.lambda0, x0
    return lam, x


# -- Gaussian parameter steps ----------------------------------------------


def _reference_constraint(reference: Gmm):
    def constraint(_x0, x):
        return w2_gmm_sq(x, reference, solver="exact")

    return constraint


def _batch_grads(policy: Gmm, batch: RolloutBatch, cfg: OptimizerConfig, split: BlockSplit):
    aug = entropy_augment(replace(batch, beta=cfg.beta), policy, split)
    return euclidean_grads(aug, policy, split, cfg.baseline, cfg.normalize_advantages)


def _accept(state: OptimizerState, new: Gmm, lam: float, cfg: OptimizerConfig, **counts) -> OptimizerState:
    moved = new is not state.policy
    if moved and w2_gmm_sq(new, state.reference_policy, solver="exact") > cfg.c_max:
        # only reachable when the search stops exactly at lambda_min
        new, moved = state.policy, False
    return replace(state, policy=new, last_step=lam, moved=moved, duals=None, **counts)


def gaussian_step(
    state: OptimizerState, batch: RolloutBatch, cfg: OptimizerConfig, split: BlockSplit
) -> OptimizerState:
    """One Riemannian ascent step on all means and covariances; weights fixed."""
    grads = _batch_grads(state.policy, batch, cfg, split)
    policy = state.policy
    d_means = grads.d_means
    d_covs = np.stack([bw_grad(g, s) for g, s in zip(grads.d_covs, policy.covs)])
    if not (np.any(d_means) or np.any(d_covs)):
        return replace(state, gauss_steps=state.gauss_steps + 1, moved=False, last_step=0.0)

    def step_fn(x0: Gmm, d, lam):
        dm, dc = d
        covs = np.stack([bw_retract(s, lam * x) for s, x in zip(x0.covs, dc)])
        return Gmm(x0.weights, x0.means + lam * dm, covs)

    lam, new = constrained_line_search(
        policy, (d_means, d_covs), cfg, _reference_constraint(state.reference_policy), step_fn
    )
    return _accept(state, new, lam, cfg, gauss_steps=state.gauss_steps + 1)


def _tril_mask(d: int) -> np.ndarray:
    return np.tril(np.ones((d, d), dtype=bool))


def _w2_term_grads(policy: Gmm, reference: Gmm, h: float):
    """Finite-difference gradient of the coupled W2 cost w.r.t. (mean, Cholesky).

    The optimal plan is held fixed (envelope argument), so each component's
    derivative only involves its own row of the cost matrix.  All central
    differences of one component are evaluated in a single batched call.
    """
    C = cost_matrix(policy, reference)
    plan, _ = exact_ot_lp(policy.weights, reference.weights, C)
    n, d = policy.means.shape
    chols = np.linalg.cholesky(policy.covs)
    rows, cols = np.nonzero(_tril_mask(d))
    n_mean, n_chol = d, rows.size
    g_mean = np.zeros((n, d))
    g_chol = np.zeros((n, d, d))
    signs = np.array([1.0, -1.0])
    for i in range(n):
        if not np.any(plan[i] > 0):
            continue
        means = np.repeat(policy.means[i][None], 2 * (n_mean + n_chol), axis=0)
        factors = np.repeat(chols[i][None], 2 * (n_mean + n_chol), axis=0)
        for k in range(n_mean):
            means[2 * k : 2 * k + 2, k] += signs * h
        for k, (a, b) in enumerate(zip(rows, cols)):
            factors[2 * (n_mean + k) : 2 * (n_mean + k) + 2, a, b] += signs * h
        covs = factors @ np.swapaxes(factors, 1, 2)
        cost = w2_gaussian_sq_matrix(means, covs, reference.means, reference.covs) @ plan[i]
        diff = (cost[0::2] - cost[1::2]) / (2 * h)
        g_mean[i] = diff[:n_mean]
        g_chol[i, rows, cols] = diff[n_mean:]
    return g_mean, g_chol


def gaussian_step_ablation(
    state: OptimizerState, batch: RolloutBatch, cfg: OptimizerConfig, split: BlockSplit
) -> OptimizerState:
    """Euclidean descent on (mean, Cholesky factor) for ``W2^2/(2 tau) - J``."""
    grads = _batch_grads(state.policy, batch, cfg, split)
    policy = state.policy
    d = policy.dim
    mask = _tril_mask(d)
    chols = np.linalg.cholesky(policy.covs)
    # d<G, L L^T>/dL = 2 G L for symmetric G
    dj_chol = 2.0 * grads.d_covs @ chols * mask
    w_mean, w_chol = _w2_term_grads(policy, state.reference_policy, cfg.ablation_fd_step)
    dir_mean = grads.d_means - w_mean / (2 * cfg.tau)
    dir_chol = dj_chol - w_chol / (2 * cfg.tau)
    if not (np.any(dir_mean) or np.any(dir_chol)):
        return replace(state, gauss_steps=state.gauss_steps + 1, moved=False, last_step=0.0)

    def step_fn(x0: Gmm, direction, lam):
        dm, dl = direction
        new_chol = chols + lam * dl
        diag = np.diagonal(new_chol, axis1=1, axis2=2)
        if np.any(diag <= 1e-6 * np.abs(np.diagonal(chols, axis1=1, axis2=2)).max()):
            raise StepTooLargeError("Cholesky diagonal left the positive orthant")
        return Gmm(x0.weights, x0.means + lam * dm, new_chol @ np.swapaxes(new_chol, 1, 2))

    lam, new = constrained_line_search(
        policy, (dir_mean, dir_chol), cfg, _reference_constraint(state.reference_policy), step_fn
    )
    return _accept(state, new, lam, cfg, gauss_steps=state.gauss_steps + 1)


# -- weight steps ----------------------------------------------------------


def weight_step(
    state: OptimizerState, batch: RolloutBatch, cfg: OptimizerConfig, split: BlockSplit
) -> OptimizerState:
    """One gradient step on the softmax logits; means and covariances fixed.

    The return term is linearized at the reference policy: its logit
    gradient is estimated once, where the batch was collected, and reused
    for every step on that batch.  Evaluated at a moved policy the
    likelihood-ratio estimator uses samples it did not generate, and after
    even one Gaussian step its weight gradient can change sign.
    """
    policy = state.policy
    w = policy.weights
    j_grad = state.j_grad_eta
    if j_grad is None:
        ref = state.reference_policy
        j_grad = chain_to_eta(_batch_grads(ref, batch, cfg, split).d_weights, ref.weights)
    direction = -j_grad
    C = cost_matrix(policy, state.reference_policy)
    w_ref = state.reference_policy.weights
    plan = None
    if state.duals is not None:
        # costs are unchanged within a weight loop: try the final epsilon
        # from the previous duals before paying for a full annealing pass
        plan = sinkhorn(w, w_ref, C, epsilon_schedule(C)[-1], max_iters=500, init_duals=state.duals)
    if plan is None or not plan.converged:
        plan = sinkhorn_annealed(w, w_ref, C)
    if plan.converged:
        direction = direction + chain_to_eta(grad_w2_weights(plan), w) / cfg.tau
    else:
        log.warning("Sinkhorn did not converge; skipping the W2 term of this weight step")
    eta = state.eta - cfg.weight_lr * direction
    eta = eta - eta.mean()
    new = Gmm(softmax(eta), policy.means, policy.covs)
    return replace(
        state, policy=new, eta=eta, weight_steps=state.weight_steps + 1,
        moved=bool(np.any(direction)), last_step=cfg.weight_lr,
        duals=(plan.dual_f, plan.dual_g) if plan.converged else None,
        j_grad_eta=j_grad,
    )


# -- outer loop ------------------------------------------------------------


class _Plateau:
    """Relative change of the batch objective below tol for `patience` steps."""

    def __init__(self, tol: float, patience: int):
        self.tol, self.patience = tol, patience
        self.prev = None
        self.quiet = 0

    def update(self, value: float) -> bool:
        if self.prev is not None:
            rel = abs(value - self.prev) / max(abs(self.prev), 1e-12)
            self.quiet = self.quiet + 1 if rel < self.tol else 0
        self.prev = value
        return self.quiet >= self.patience


def _inner_loop(state, batch, cfg, split, step, n_iters, trust_radius=None):
    """Repeat ``step`` until the batch objective plateaus, the step stalls or
    the cap is hit.  With ``trust_radius`` a step that would leave the W2
    ball around the reference policy is discarded and the loop ends."""
    plateau = _Plateau(cfg.inner_rel_tol, cfg.inner_patience)
    for _ in range(n_iters):
        new = step(state, batch, cfg, split)
        if trust_radius is not None and new.moved:
            if w2_gmm_sq(new.policy, new.reference_policy, solver="exact") > trust_radius:
                break
        state = new
        if not state.moved:
            break
        if plateau.update(free_energy_estimate(replace(batch, beta=cfg.beta), state.policy, split)):
            break
    return state


@dataclass
class OptimizeResult:
    policy: Gmm
    metrics: list[dict]
    converged: bool
    env_steps: int
    first_full_success_step: int | None = None
    accepted_w2: list[float] = field(default_factory=list)
    numeric_aborts: int = 0


@dataclass(frozen=True)
class SuccessWindow:
    """Stop once the mean batch success rate over the last ``window`` batches
    reaches ``threshold``.  A single batch of ten episodes is too noisy to
    certify a policy on its own."""

    threshold: float = 0.9
    window: int = 3

    def __call__(self, metrics: list[dict]) -> bool:
        if len(metrics) < self.window:
            return False
        recent = [row["success_rate"] for row in metrics[-self.window :]]
        return float(np.mean(recent)) >= self.threshold


def optimize(
    initial_policy: Gmm,
    task: TaskSpec,
    cfg: OptimizerConfig,
    rng: np.random.Generator,
    success_criterion: Callable[[list[dict]], bool] | None = SuccessWindow(),
    max_env_steps: int = 200_000,
    metrics_writer=None,
    record_constraint: bool = False,
) -> OptimizeResult:
    """Adapt ``initial_policy`` to ``task`` until success or budget exhaustion.

    Args:
        initial_policy: Joint state-action GMM.
        task: Environment definition.
        cfg: Optimizer configuration.
        rng: Random source for rollouts.
        success_criterion: Predicate on the metrics rows so far (the row of
            the current batch included); ``None`` disables early stopping.
        max_env_steps: Budget of environment steps.
        metrics_writer: Optional ``csv.writer``-like object receiving one
            row per outer iteration.
        record_constraint: Keep the mixture W2 to the reference of every
            accepted Gaussian step in ``OptimizeResult.accepted_w2``.
    """
    split = task.split
    if initial_policy.dim != split.dim:
        raise InputError("policy dimension does not match the task")
    gauss = gaussian_step if cfg.mode == "riemannian" else gaussian_step_ablation
    policy = initial_policy
    result = OptimizeResult(policy, [], False, 0)
    t0 = time.perf_counter()
    while result.env_steps < max_env_steps:
        batch = rollout(policy, split, task, cfg.episodes_per_iter, rng, cfg.gamma, cfg.beta)
        result.env_steps += batch.n_steps
        row = {
            "outer_iter": len(result.metrics),
            "env_steps": result.env_steps,
            "J_estimate": free_energy_estimate(batch, policy, split),
            "success_rate": success_rate(batch, task),
            "w2_drift": 0.0,
            "wallclock_s": 0.0,
        }
        result.metrics.append(row)
        if row["success_rate"] >= 1.0 and result.first_full_success_step is None:
            result.first_full_success_step = result.env_steps
        if success_criterion is not None and success_criterion(result.metrics):
            result.converged = True
        elif result.env_steps < max_env_steps:
            policy, row["w2_drift"] = _update(policy, batch, cfg, split, gauss, result, record_constraint)
        row["wallclock_s"] = time.perf_counter() - t0
        if metrics_writer is not None:
            metrics_writer.writerow([row[k] for k in METRICS_HEADER])
        if result.converged:
            break
    result.policy = policy
    return result


def _update(policy, batch, cfg, split, gauss, result, record):
    """Alternate Gaussian and weight inner loops on one batch.

    Rounds stop once the policy leaves the W2 trust radius around the
    batch's reference policy or the batch objective stops improving.
    Numeric failures end the update early, keeping the last valid iterate.
    """
    state = OptimizerState.start(policy)
    drift = 0.0
    best = free_energy_estimate(replace(batch, beta=cfg.beta), policy, split)
    try:
        for _ in range(cfg.max_rounds):
            state = _recording_loop(state, batch, cfg, split, gauss, result.accepted_w2, record)
            state = _inner_loop(
                state, batch, cfg, split, weight_step, cfg.inner_weight_iters, cfg.w2_trust_radius
            )
            drift = w2_gmm_sq(state.policy, state.reference_policy, solver="exact")
            if drift > cfg.w2_trust_radius:
                break
            value = free_energy_estimate(replace(batch, beta=cfg.beta), state.policy, split)
            if value <= best + cfg.inner_rel_tol * abs(best):
                break
            best = value
    except NumericError as exc:
        result.numeric_aborts += 1
        log.warning("inner optimization aborted: %s", exc)
    return state.policy, drift


def _recording_loop(state, batch, cfg, split, gauss, accepted, record):
    plateau = _Plateau(cfg.inner_rel_tol, cfg.inner_patience)
    for _ in range(cfg.inner_gauss_iters):
        state = gauss(state, batch, cfg, split)
        if not state.moved:
            break
        if record:
            accepted.append(w2_gmm_sq(state.policy, state.reference_policy, solver="exact"))
        if plateau.update(free_energy_estimate(replace(batch, beta=cfg.beta), state.policy, split)):
            break
    return state


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for row in metrics:
            w.writerow([row[k] for k in METRICS_HEADER])
