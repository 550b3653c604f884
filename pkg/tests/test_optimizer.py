import csv
import io

import numpy as np
import pytest

from wgfgmm.env import demo_generate, demos_to_dataset, task_preset
from wgfgmm.errors import InputError, StepTooLargeError
from wgfgmm.gmm import BlockSplit, Conditioner, Gmm, em_fit, gmm_sample
from wgfgmm.optimizer import (
    METRICS_HEADER,
    OptimizerConfig,
    OptimizerState,
    constrained_line_search,
    gaussian_step,
    gaussian_step_ablation,
    optimize,
    softmax,
    weight_step,
    write_metrics_csv,
)
from wgfgmm.optimizer import _w2_term_grads
from wgfgmm.ot import cost_matrix, exact_ot_lp
from wgfgmm.ot import w2_gmm_sq
from wgfgmm.policy_grad import (
    RolloutBatch,
    Trajectory,
    chain_to_eta,
    entropy_augment,
    euclidean_grads,
)

SPLIT = BlockSplit(1, 1)


def sq_dist(x0, x):
    return float(np.sum((x - x0) ** 2))


def joint_batch(x, rewards, split=SPLIT, beta=0.0):
    n = split.n_state
    trajs = [Trajectory(xi[None, :n], xi[None, n:], [r]) for xi, r in zip(x, rewards)]
    return RolloutBatch(trajs, gamma=1.0, beta=beta)


def two_armed_policy(w2=0.5):
    covs = np.tile(np.diag([1.0, 0.25]), (2, 1, 1))
    return Gmm([1 - w2, w2], [[0.0, -2.0], [0.0, 2.0]], covs)


@pytest.fixture(scope="module")
def reaching():
    original = task_preset("reaching", adapted=False)
    rng = np.random.default_rng(0)
    demos = demo_generate(original, rng=rng, noise_scale=0.2)
    policy = em_fit(demos_to_dataset(demos), original.n_components, rng,
                    reg_covar=[1e-3, 1e-3, 0.25, 0.25])
    return policy, task_preset("reaching")


# -- configuration -----------------------------------------------------------


def test_config_validation_and_roundtrip():
    cfg = OptimizerConfig(tau=3.0, mode="cholesky_ablation")
    assert OptimizerConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"tau": 0.0}, {"alpha": 1.0}, {"gamma": 0.0}, {"beta": -1.0},
                {"episodes_per_iter": 0}, {"mode": "newton"}, {"c_max": -1.0}):
        with pytest.raises(InputError):
            OptimizerConfig(**bad)


def test_state_start_matches_weights():
    policy = two_armed_policy(0.3)
    state = OptimizerState.start(policy)
    np.testing.assert_allclose(softmax(state.eta), policy.weights, atol=1e-12)
    assert state.eta.sum() == pytest.approx(0.0, abs=1e-12)
    assert state.reference_policy is policy


# -- line search ---------------------------------------------------------------


def test_line_search_accepts_first_step():
    cfg = OptimizerConfig()
    lam, x = constrained_line_search(np.zeros(2), np.ones(2), cfg, lambda a, b: 0.0)
    assert lam == cfg.lambda0
    np.testing.assert_array_equal(x, [cfg.lambda0, cfg.lambda0])


def test_line_search_falls_back_to_start():
    cfg = OptimizerConfig()
    x0 = np.array([1.0, 2.0])
    lam, x = constrained_line_search(x0, np.ones(2), cfg, lambda a, b: np.inf)
    assert lam == cfg.lambda0
    assert x is x0


def test_line_search_two_shrinks():
    # c = lam^2 |d|^2 with |d| = 1: 0.01, 0.0025, 0.000625 for lam0 = 0.1, alpha = 0.5
    cfg = OptimizerConfig(lambda0=0.1, alpha=0.5, c_max=1e-3)
    d = np.array([0.6, 0.8])
    lam, x = constrained_line_search(np.zeros(2), d, cfg, sq_dist)
    assert lam == pytest.approx(0.1 * 0.5**2)
    np.testing.assert_allclose(x, lam * d)


def test_line_search_treats_failed_retraction_as_violation():
    cfg = OptimizerConfig(lambda0=1.0, alpha=0.5)

    def step_fn(x0, d, lam):
        if lam > 0.3:
            raise StepTooLargeError("too far")
        return x0 + lam * d

    lam, _ = constrained_line_search(np.zeros(1), np.ones(1), cfg, lambda a, b: 0.0, step_fn)
    assert lam == 0.25


# -- Gaussian steps --------------------------------------------------------------


def test_gaussian_step_zero_gradient_keeps_state():
    policy = two_armed_policy()
    x = gmm_sample(policy, np.random.default_rng(0), 20)
    state = OptimizerState.start(policy)
    cfg = OptimizerConfig(beta=0.0)
    for step in (gaussian_step, gaussian_step_ablation):
        new = step(state, joint_batch(x, np.zeros(20)), cfg, SPLIT)
        assert not new.moved
        np.testing.assert_allclose(new.policy.means, policy.means, atol=1e-9)
        np.testing.assert_allclose(new.policy.covs, policy.covs, atol=1e-9)


def test_gaussian_step_moves_conditional_mean_to_target():
    target = 10.0
    policy = Gmm([1.0], [[0.0, 0.0]], [np.diag([1.0, 0.5])])
    cfg = OptimizerConfig(beta=0.0, c_max=0.01)
    rng = np.random.default_rng(1)
    gaps = []
    for _ in range(50):
        states = np.zeros((4000, 1))
        actions = Conditioner(policy, SPLIT).sample(states, rng)
        x = np.hstack([states, actions])
        batch = joint_batch(x, -((actions[:, 0] - target) ** 2))
        state = gaussian_step(OptimizerState.start(policy), batch, cfg, SPLIT)
        assert state.moved
        assert w2_gmm_sq(state.policy, policy) <= cfg.c_max + 1e-12
        policy = state.policy
        gaps.append(abs(Conditioner(policy, SPLIT).cond_means(np.zeros((1, 1)))[0, 0, 0] - target))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    np.testing.assert_array_equal(policy.weights, [1.0])


@pytest.mark.parametrize("step,n_steps", [(gaussian_step, 1000), (gaussian_step_ablation, 100)])
def test_covariances_stay_spd(step, n_steps):
    rng = np.random.default_rng(2)
    policy = two_armed_policy()
    cfg = OptimizerConfig(beta=0.0, c_max=0.5)
    x = gmm_sample(policy, rng, 30)
    for _ in range(n_steps):
        batch = joint_batch(x, rng.standard_normal(30))
        policy = step(OptimizerState.start(policy), batch, cfg, SPLIT).policy
        assert np.all(np.linalg.eigvalsh(policy.covs) > 0)
        np.testing.assert_array_equal(policy.covs, np.swapaxes(policy.covs, 1, 2))


def test_ablation_w2_gradient_matches_closed_form_mean_part():
    reference = two_armed_policy(0.4)
    current = Gmm([0.5, 0.5], reference.means + [[0.3, -0.2], [0.1, 0.4]],
                  reference.covs * [[[1.2]], [[0.8]]])
    g_mean, g_chol = _w2_term_grads(current, reference, 1e-5)
    plan, _ = exact_ot_lp(current.weights, reference.weights, cost_matrix(current, reference))
    expected = 2 * (plan.sum(1)[:, None] * current.means - plan @ reference.means)
    np.testing.assert_allclose(g_mean, expected, atol=1e-8)
    assert np.all(np.triu(g_chol[0], 1) == 0)


# -- weight steps -----------------------------------------------------------------


def test_weight_step_at_reference_with_zero_reward():
    policy = two_armed_policy(0.3)
    x = gmm_sample(policy, np.random.default_rng(3), 20)
    state = OptimizerState.start(policy)
    new = weight_step(state, joint_batch(x, np.zeros(20)), OptimizerConfig(beta=0.0), SPLIT)
    np.testing.assert_allclose(new.eta, state.eta, atol=1e-8)
    np.testing.assert_allclose(softmax(new.eta), new.policy.weights, atol=1e-12)


def test_weight_step_bandit_prefers_rewarded_component():
    policy = two_armed_policy(0.5)
    rng = np.random.default_rng(4)
    cfg = OptimizerConfig(beta=0.0)
    previous = policy.weights[1]
    for _ in range(10):
        x = gmm_sample(policy, rng, 200)
        batch = joint_batch(x, (x[:, 1] > 0).astype(float))
        state = weight_step(OptimizerState.start(policy), batch, cfg, SPLIT)
        np.testing.assert_allclose(softmax(state.eta), state.policy.weights, atol=1e-12)
        np.testing.assert_array_equal(state.policy.means, policy.means)
        policy = state.policy
        assert policy.weights[1] > previous
        previous = policy.weights[1]


def test_weight_step_without_w2_term_is_pure_ascent():
    reference = two_armed_policy(0.5)
    current = two_armed_policy(0.3)
    rng = np.random.default_rng(5)
    x = gmm_sample(reference, rng, 50)
    batch = joint_batch(x, rng.standard_normal(50))
    cfg = OptimizerConfig(tau=1e300)
    state = OptimizerState.start(current, reference)
    new = weight_step(state, batch, cfg, SPLIT)
    aug = entropy_augment(RolloutBatch(batch.trajectories, 1.0, cfg.beta), reference, SPLIT)
    grads = euclidean_grads(aug, reference, SPLIT, baseline=True, normalize=True)
    ascent = state.eta + cfg.weight_lr * chain_to_eta(grads.d_weights, reference.weights)
    np.testing.assert_allclose(new.eta, ascent - ascent.mean(), atol=1e-12)
    # a finite tau pulls the weights back toward the reference
    pulled = weight_step(state, batch, OptimizerConfig(tau=0.1), SPLIT)
    assert pulled.policy.weights[1] > new.policy.weights[1]


# -- outer loop ---------------------------------------------------------------------


def test_immediate_success_returns_initial_policy(reaching):
    policy, task = reaching
    res = optimize(policy, task, OptimizerConfig(), np.random.default_rng(0),
                   success_criterion=lambda metrics: True)
    assert res.converged
    assert res.policy is policy
    assert len(res.metrics) == 1 and res.metrics[0]["w2_drift"] == 0.0


def test_tiny_budget_bookkeeping_and_trust_region(reaching):
    policy, task = reaching
    cfg = OptimizerConfig(episodes_per_iter=5)
    sink = io.StringIO()
    res = optimize(policy, task, cfg, np.random.default_rng(1), max_env_steps=3000,
                   metrics_writer=csv.writer(sink), record_constraint=True)
    assert not res.converged
    assert len(res.metrics) == 3
    assert [row["outer_iter"] for row in res.metrics] == [0, 1, 2]
    assert res.env_steps == res.metrics[-1]["env_steps"] == 3 * 5 * task.horizon
    assert len(sink.getvalue().splitlines()) == 3
    assert res.accepted_w2 and max(res.accepted_w2) <= cfg.c_max + 1e-6
    assert all(row["w2_drift"] <= cfg.w2_trust_radius + 1e-9 for row in res.metrics)
    assert np.all(np.linalg.eigvalsh(res.policy.covs) > 0)
    assert res.policy.weights.sum() == pytest.approx(1.0)


def test_optimize_is_deterministic(reaching, tmp_path):
    policy, task = reaching
    cfg = OptimizerConfig(episodes_per_iter=5)
    logs = []
    for k in range(2):
        res = optimize(policy, task, cfg, np.random.default_rng(7), max_env_steps=2000)
        path = tmp_path / f"m{k}.csv"
        write_metrics_csv(path, [dict(row, wallclock_s=0.0) for row in res.metrics])
        logs.append(path.read_bytes())
    assert logs[0] == logs[1]
    assert logs[0].decode().splitlines()[0] == ",".join(METRICS_HEADER)


def test_ablation_mode_runs(reaching):
    policy, task = reaching
    cfg = OptimizerConfig(mode="cholesky_ablation", episodes_per_iter=5)
    res = optimize(policy, task, cfg, np.random.default_rng(2), max_env_steps=2000,
                   record_constraint=True)
    assert res.numeric_aborts == 0
    assert max(res.accepted_w2) <= cfg.c_max + 1e-6
    assert np.all(np.linalg.eigvalsh(res.policy.covs) > 0)
    assert not np.allclose(res.policy.means, policy.means)
