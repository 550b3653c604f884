"""Discrete optimal transport between Gaussian mixtures.

The mixture distance is the discrete OT problem whose ground cost is the
closed-form squared W2 between components.  Two solvers are provided: a
log-domain Sinkhorn with epsilon annealing (its dual potentials give the
gradient of the distance w.r.t. the source weights) and an exact LP used
as the reference solver and test oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.sparse.csgraph import connected_components

from .bures import w2_gaussian_sq_matrix
from .errors import DimensionError, GradientUnreliableError, InputError, NumericError
from .gmm import Gmm

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
MAX_LP_CELLS = 64
LP_MASS_FLOOR = 1e-12
LP_TOL = 1e-10


@dataclass(frozen=True)
class TransportPlan:
    """Entropic coupling with its centered dual potentials."""

    plan: np.ndarray
    dual_f: np.ndarray
    dual_g: np.ndarray
    cost_value: float
    epsilon: float
    converged: bool = True
    n_iters: int = 0
    row_violation: float = 0.0
    col_violation: float = 0.0

    @property
    def marginal_violation(self) -> float:
        return self.row_violation + self.col_violation


def cost_matrix(gmm1: Gmm, gmm2: Gmm) -> np.ndarray:
    """Pairwise squared W2 between the components of two mixtures."""
    if gmm1.dim != gmm2.dim:
        raise DimensionError(f"mixtures of dims {gmm1.dim} and {gmm2.dim}")
    return w2_gaussian_sq_matrix(gmm1.means, gmm1.covs, gmm2.means, gmm2.covs)


def floor_weights(w: np.ndarray, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    w = np.maximum(np.asarray(w, dtype=float), floor)
    return w / w.sum()


def _lse_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def _check_problem(w1, w2, C):
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    C = np.asarray(C, dtype=float)
    if C.shape != (w1.size, w2.size):
        raise DimensionError(f"cost {C.shape} for marginals of sizes {w1.size}, {w2.size}")
    if not np.all(np.isfinite(C)):
        raise InputError("cost matrix has non-finite entries")
    for w in (w1, w2):
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
            raise InputError("marginals must lie on the simplex")
    return w1, w2, C


def _row_sums(K, a, b):
    return np.exp(_lse_rows(K + b) + a)


def _newton_polish(K, a, log_w1, log_w2, tol, max_steps=50, max_log_step=5.0):
    """Newton ascent on the concave semi-dual ``<w1, a> + <w2, b(a)>``.

    ``b(a)`` is the exact column update, so only the row marginal has to be
    matched.  The negative Hessian ``diag(P 1) - P diag(1/w2) P^T`` is
    singular along the constant vector, hence the least-squares solve.
    Steps are capped at ``max_log_step`` per coordinate and then damped by
    an Armijo test on the semi-dual.
    """
    w1, w2 = np.exp(log_w1), np.exp(log_w2)
    Kt = np.ascontiguousarray(K.T)

    def evaluate(a):
        b = log_w2 - _lse_rows(Kt + a)
        plan = np.exp(K + a[:, None] + b[None, :])
        return b, plan, float(w1 @ a + w2 @ b)

    b, plan, value = evaluate(a)
    grad = w1 - plan.sum(1)
    err = np.abs(grad).sum()
    steps = 0
    while err > tol and steps < max_steps:
        steps += 1
        hess = np.diag(plan.sum(1)) - (plan / w2) @ plan.T
        delta = np.linalg.lstsq(hess, grad, rcond=None)[0]
        # near-empty couplings make the quadratic model useless far away;
        # cap the change of any log-scaling per step
        biggest = np.abs(delta).max(initial=0.0)
        if biggest > max_log_step:
            delta *= max_log_step / biggest
        slope = float(grad @ delta)
        if not slope > 0:
            break
        step = 1.0
        while step > 1e-8:
            a_new = a + step * delta
            b_new, plan_new, value_new = evaluate(a_new)
            if np.isfinite(value_new) and value_new >= value + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break
        a, b, plan, value = a_new, b_new, plan_new, value_new
        grad = w1 - plan.sum(1)
        err = np.abs(grad).sum()
    return a, b, err, steps


def _canonical_gauge(K, a, b, w1, w2, tol, support_floor=1e-12):
    """Pick the smallest-norm duals among those giving the same plan.

    When the coupling is close to a permutation its support graph splits
    into several connected pieces, and each piece carries its own additive
    constant that Sinkhorn leaves wherever the warm start put it.  Every
    piece is shifted toward zero mean of its row potentials; the shift is
    scaled back by bisection until the marginals stay within ``tol``.
    """
    n1, n2 = K.shape
    plan = np.exp(K + a[:, None] + b[None, :])
    adj = np.zeros((n1 + n2, n1 + n2), dtype=bool)
    adj[:n1, n1:] = plan > support_floor
    n_groups, labels = connected_components(adj, directed=False)
    if n_groups == 1:
        return a, b
    rows, cols = labels[:n1], labels[n1:]
    shift = np.zeros(n_groups)
    for k in range(n_groups):
        if np.any(rows == k):
            shift[k] = -a[rows == k].mean()
    scale = 1.0
    for _ in range(30):
        a_new = a + scale * shift[rows]
        b_new = b - scale * shift[cols]
        with np.errstate(over="ignore"):
            # an overflowing trial shift fails the marginal check below
            plan = np.exp(K + a_new[:, None] + b_new[None, :])
        if (
            np.abs(plan.sum(1) - w1).sum() <= tol
            and np.abs(plan.sum(0) - w2).sum() <= tol
        ):
            return a_new, b_new
        scale *= 0.5
    return a, b


def sinkhorn(
    w1,
    w2,
    C,
    epsilon: float,
    max_iters: int = 5000,
    tol: float = 1e-9,
    init_duals: tuple[np.ndarray, np.ndarray] | None = None,
    newton_after: int | None = 200,
) -> TransportPlan:
    """Entropic OT by log-domain Sinkhorn iterations.

    Stops once the L1 violation of the row marginal (columns are exact
    after each g-update) drops to ``tol``.  Sinkhorn converges linearly with
    a rate that degrades as ``epsilon`` shrinks, so after ``newton_after``
    iterations the remaining error is removed by Newton steps on the same
    dual problem (set it to ``None`` for plain Sinkhorn).  The returned
    duals are centered so that ``mean(dual_f) == 0``.  If the iteration
    budget is exhausted the last iterate is returned with ``converged=False``.
    Duals that the plan does not pin down are set canonically, see
    ``_canonical_gauge``.
    """
    w1, w2, C = _check_problem(w1, w2, C)
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    w1, w2 = floor_weights(w1), floor_weights(w2)
    log_w1, log_w2 = np.log(w1), np.log(w2)
    if init_duals is None:
        f = np.zeros(w1.size)
        g = np.zeros(w2.size)
    else:
        f, g = (np.array(x, dtype=float) for x in init_duals)

    converged = False
    err = np.inf
    it = 0
    K = -C / epsilon
    Kt = np.ascontiguousarray(K.T)
    a, b = f / epsilon, g / epsilon
    switch = max_iters if newton_after is None else min(newton_after, max_iters)
    for it in range(1, switch + 1):
        a = log_w1 - _lse_rows(K + b)
        b = log_w2 - _lse_rows(Kt + a)
        if it % 5 == 0 or it == switch:
            err = np.abs(_row_sums(K, a, b) - w1).sum()
            if err <= tol:
                converged = True
                break
    if not converged and switch < max_iters:
        a_n, b_n, err_n, steps = _newton_polish(K, a, log_w1, log_w2, tol)
        it += steps
        if err_n <= tol:
            a, b, converged = a_n, b_n, True
        else:
            # Newton stalled; finish with plain iterations from its iterate
            a, b = a_n, b_n
            for it in range(it + 1, max_iters + 1):
                a = log_w1 - _lse_rows(K + b)
                b = log_w2 - _lse_rows(Kt + a)
                if it % 5 == 0 and np.abs(_row_sums(K, a, b) - w1).sum() <= tol:
                    converged = True
                    break
    if converged:
        a, b = _canonical_gauge(K, a, b, w1, w2, tol)
    f, g = epsilon * a, epsilon * b
    plan = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    shift = f.mean()
    f, g = f - shift, g + shift
    row = float(np.abs(plan.sum(1) - w1).sum())
    col = float(np.abs(plan.sum(0) - w2).sum())
    if not np.all(np.isfinite(plan)):
        raise NumericError("Sinkhorn produced a non-finite plan")
    return TransportPlan(
        plan, f, g, float((plan * C).sum()), float(epsilon), converged, it, row, col
    )


def epsilon_schedule(C, n_stages: int = 8, start: float = 0.1, end: float = 1e-3) -> np.ndarray:
    """Geometric epsilon schedule from ``start * median(C)`` to ``end * median(C)``."""
    C = np.asarray(C, dtype=float)
    scale = float(np.median(C))
    if scale <= 0:
        scale = float(C.mean())
    if scale <= 0:
        scale = 1.0
    return scale * np.geomspace(start, end, max(n_stages, 1))


def sinkhorn_annealed(
    w1,
    w2,
    C,
    n_stages: int = 8,
    start: float = 0.1,
    end: float = 1e-3,
    max_iters: int = 5000,
    tol: float = 1e-9,
    stage_tol: float = 1e-6,
    return_path: bool = False,
):
    """Sinkhorn warm-started along a decreasing epsilon schedule.

    Intermediate stages only provide warm starts and stop at ``stage_tol``;
    the final stage runs to ``tol``.  Returns the plan at the final epsilon,
    and optionally the list of plans for every stage.
    """
    duals = None
    path = []
    schedule = epsilon_schedule(C, n_stages, start, end)
    for k, eps in enumerate(schedule):
        stage = tol if k == len(schedule) - 1 else max(tol, stage_tol)
        tp = sinkhorn(w1, w2, C, eps, max_iters=max_iters, tol=stage, init_duals=duals)
        duals = (tp.dual_f, tp.dual_g)
        path.append(tp)
    return (path[-1], path) if return_path else path[-1]


def exact_ot_lp(w1, w2, C) -> tuple[np.ndarray, float]:
    """Exact discrete OT by linear programming (HiGHS dual simplex).

    Limited to ``N1 * N2 <= 64`` cells.  Components with mass below
    ``LP_MASS_FLOOR`` are dropped before solving; the solver's feasibility
    tolerances cannot represent them anyway.
    """
    w1, w2, C = _check_problem(w1, w2, C)
    n1, n2 = C.shape
    if n1 * n2 > MAX_LP_CELLS:
        raise InputError(f"exact OT limited to {MAX_LP_CELLS} cells, got {n1}x{n2}")
    rows = np.flatnonzero(w1 > LP_MASS_FLOOR)
    cols = np.flatnonzero(w2 > LP_MASS_FLOOR)
    v1 = w1[rows] / w1[rows].sum()
    v2 = w2[cols] / w2[cols].sum()
    sub = C[np.ix_(rows, cols)]
    plan = np.zeros((n1, n2))
    if rows.size == 1 or cols.size == 1:
        plan[np.ix_(rows, cols)] = np.outer(v1, v2)
        return plan, float((plan * C).sum())
    m1, m2 = sub.shape
    a_eq = np.zeros((m1 + m2, m1 * m2))
    for i in range(m1):
        a_eq[i, i * m2 : (i + 1) * m2] = 1.0
    for j in range(m2):
        a_eq[m1 + j, j::m2] = 1.0
    b_eq = np.concatenate([v1, v2])
    # drop one redundant equality; the marginals share a total mass.  The
    # default 1e-7 tolerances misread masses of that order as infeasible.
    res = linprog(
        sub.ravel(), A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs-ds",
        options={"primal_feasibility_tolerance": LP_TOL, "dual_feasibility_tolerance": LP_TOL},
    )
    if res.status != 0:
        raise NumericError(f"transport LP failed: {res.message}")
    plan[np.ix_(rows, cols)] = np.clip(res.x.reshape(m1, m2), 0.0, None)
    return plan, float((plan * C).sum())


def w2_gmm_sq(gmm1: Gmm, gmm2: Gmm, epsilon: float | None = None, solver: str = "exact") -> float:
    """Mixture W2 cost: OT over component weights with Gaussian W2 ground cost.

    ``solver`` is ``"exact"`` or ``"sinkhorn"``; for Sinkhorn a fixed
    ``epsilon`` may be given, otherwise the annealed schedule is used.
    """
    C = cost_matrix(gmm1, gmm2)
    if solver == "exact":
        return exact_ot_lp(gmm1.weights, gmm2.weights, C)[1]
    if solver == "sinkhorn":
        if epsilon is None:
            tp = sinkhorn_annealed(gmm1.weights, gmm2.weights, C)
        else:
            tp = sinkhorn(gmm1.weights, gmm2.weights, C, epsilon)
        return tp.cost_value
    raise InputError(f"unknown OT solver {solver!r}")


def grad_w2_weights(plan: TransportPlan) -> np.ndarray:
    """Centered source dual potential: gradient of the OT cost w.r.t. source weights."""
    if not plan.converged:
        raise GradientUnreliableError("Sinkhorn did not converge; duals are unreliable")
    return plan.dual_f - plan.dual_f.mean()
