"""Kinematic point-mass environment, task presets and synthetic demonstrations.

The state is the end-effector position and the action its velocity; one
step integrates ``pos += dt * action``.  Collision checks look only at the
post-step position (no swept test), which is adequate for dt = 0.01 and
the velocities the demonstrations produce.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
from scipy.special import logsumexp

from .errors import EnvContractError, InputError
from .gmm import BlockSplit, Conditioner, Gmm, component_logpdfs
from .policy_grad import RolloutBatch, Trajectory

TASK_KINDS = ("reaching", "collision_avoidance", "multi_goal")
PRESETS = {"reaching": "reaching", "collision": "collision_avoidance", "multigoal": "multi_goal"}


@dataclass(frozen=True)
class TaskSpec:
    """Task geometry, rewards and success threshold.

    ``targets[0]`` is the goal the reward and success predicate refer to.
    ``demo_paths`` are the waypoint polylines the synthetic demonstrations
    follow; demos alternate between paths.
    """

    kind: str
    start: tuple
    targets: tuple
    obstacles: tuple = ()
    horizon: int = 200
    dt: float = 0.01
    workspace_bound: float | None = None
    success_threshold: float = 0.5
    divergence_penalty: float = -10.0
    collision_penalty: float = -10.0
    reward_kind: str = "dense"
    demo_paths: tuple = ()
    n_demos: int = 12
    n_components: int = 7
    tail_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InputError(f"unknown task kind {self.kind!r}")
        if self.reward_kind not in ("dense", "sparse"):
            raise InputError(f"unknown reward kind {self.reward_kind!r}")
        start = tuple(float(v) for v in self.start)
        targets = tuple(tuple(float(v) for v in t) for t in self.targets)
        obstacles = tuple((tuple(float(v) for v in c), float(r)) for c, r in self.obstacles)
        paths = tuple(tuple(tuple(float(v) for v in p) for p in path) for path in self.demo_paths)
        if not targets:
            raise InputError("a task needs at least one target")
        if any(len(t) != len(start) for t in targets):
            raise InputError("targets and start have different dimensions")
        if self.horizon < 1 or self.dt <= 0:
            raise InputError("horizon must be >= 1 and dt > 0")
        if any(r <= 0 for _, r in obstacles):
            raise InputError("obstacle radii must be positive")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "obstacles", obstacles)
        object.__setattr__(self, "demo_paths", paths)
        if self.workspace_bound is None:
            pts = [np.asarray(t) for t in targets] + [np.asarray(p) for path in paths for p in path]
            object.__setattr__(
                self, "workspace_bound", 3.0 * max(float(np.linalg.norm(p)) for p in pts)
            )

    @property
    def d(self) -> int:
        return len(self.start)

    @property
    def target(self) -> np.ndarray:
        return np.asarray(self.targets[0])

    @property
    def split(self) -> BlockSplit:
        return BlockSplit(self.d, self.d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TaskSpec":
        return cls(**doc)


def task_preset(name: str, adapted: bool = True) -> TaskSpec:
    """Built-in tasks.

    ``adapted=False`` gives the task the demonstrations solve (original
    target, no new obstacles); ``adapted=True`` the adaptation target.
    """
    kind = PRESETS.get(name, name)
    if kind == "reaching":
        path = ((0.0, 0.0), (6.0, 0.0), (6.0, -9.0))
        target = (6.0, -6.5) if adapted else (6.0, -9.0)
        return TaskSpec(
            kind, (0.0, 0.0), (target,), reward_kind="dense",
            demo_paths=(path,), n_demos=12, n_components=7,
            workspace_bound=3.0 * float(np.hypot(6.0, 9.0)),
        )
    if kind == "collision_avoidance":
        path = ((0.0, 0.0), (10.0, 0.0))
        obstacles = (((5.0, -0.8), 0.9), ((5.0, -3.2), 0.9)) if adapted else ()
        target = (10.0, -2.0) if adapted else (10.0, 0.0)
        return TaskSpec(
            kind, (0.0, 0.0), (target,), obstacles, reward_kind="sparse",
            demo_paths=(path,), n_demos=10, n_components=3,
            workspace_bound=3.0 * 10.0,
        )
    if kind == "multi_goal":
        upper = ((0.0, 0.0), (8.0, 4.0))
        lower = ((0.0, 0.0), (8.0, -4.0))
        target = (8.0, 3.6) if adapted else (8.0, 4.0)
        return TaskSpec(
            kind, (0.0, 0.0), (target,), reward_kind="sparse",
            demo_paths=(upper, lower), n_demos=12, n_components=6,
            workspace_bound=3.0 * float(np.hypot(8.0, 4.0)),
        )
    raise InputError(f"unknown task preset {name!r}")


# -- single environment ----------------------------------------------------


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    step_index: int = 0
    done: bool = False
    done_reason: str | None = None


def reset(task: TaskSpec) -> EnvState:
    return EnvState(np.array(task.start, dtype=float))


def _advance(pos: np.ndarray, act: np.ndarray, step_index: int, task: TaskSpec):
    """Vectorized transition for rows of ``pos``.

    Returns new positions, rewards, done flags and integer done codes
    (0 running, 1 horizon, 2 collision, 3 divergence).
    """
    new = pos + task.dt * act
    k = new.shape[0]
    reward = np.zeros(k)
    code = np.zeros(k, dtype=int)
    at_horizon = step_index + 1 >= task.horizon
    err = np.linalg.norm(new - task.target, axis=1)
    if task.reward_kind == "dense":
        reward[:] = -err
    elif at_horizon:
        reward[:] = -err
    if at_horizon:
        code[:] = 1
    diverged = np.linalg.norm(new, axis=1) > task.workspace_bound
    reward[diverged] = task.divergence_penalty
    code[diverged] = 3
    hit = np.zeros(k, dtype=bool)
    for center, radius in task.obstacles:
        hit |= np.linalg.norm(new - np.asarray(center), axis=1) < radius
    reward[hit] = task.collision_penalty
    code[hit] = 2
    return new, reward, code


_REASONS = {1: "horizon", 2: "collision", 3: "divergence"}


def step(state: EnvState, action, task: TaskSpec) -> tuple[EnvState, float]:
    if state.done:
        raise EnvContractError("step() called on a finished episode")
    action = np.asarray(action, dtype=float)
    if action.shape != (task.d,):
        raise InputError(f"action of shape {action.shape} for a {task.d}-d task")
    new, reward, code = _advance(state.position[None], action[None], state.step_index, task)
    c = int(code[0])
    return (
        EnvState(new[0], state.step_index + 1, c != 0, _REASONS.get(c)),
        float(reward[0]),
    )


# -- rollouts --------------------------------------------------------------


def rollout(
    policy: Gmm,
    split: BlockSplit,
    task: TaskSpec,
    M: int,
    rng: np.random.Generator,
    gamma: float = 0.99,
    beta: float = 0.0,
) -> RolloutBatch:
    """Run ``M`` episodes in lockstep, sampling actions from the GMR policy."""
    if M < 1:
        raise InputError("a rollout needs at least one episode")
    if split.n_state != task.d or split.n_action != task.d or policy.dim != split.dim:
        raise InputError("policy dimensions do not match the task")
    cond = Conditioner(policy, split)
    T = task.horizon
    states = np.zeros((M, T, task.d))
    actions = np.zeros((M, T, task.d))
    rewards = np.zeros((M, T))
    lengths = np.full(M, T)
    codes = np.ones(M, dtype=int)
    pos = np.tile(np.asarray(task.start, dtype=float), (M, 1))
    alive = np.arange(M)
    for t in range(T):
        s = pos[alive]
        a = cond.sample(s, rng)
        new, r, code = _advance(s, a, t, task)
        states[alive, t] = s
        actions[alive, t] = a
        rewards[alive, t] = r
        pos[alive] = new
        ended = code != 0
        if np.any(ended):
            idx = alive[ended]
            lengths[idx] = t + 1
            codes[idx] = code[ended]
            alive = alive[~ended]
            if alive.size == 0:
                break
    trajs = [
        Trajectory(
            states[i, : lengths[i]],
            actions[i, : lengths[i]],
            rewards[i, : lengths[i]],
            terminated_early=bool(codes[i] != 1),
            done_reason=_REASONS[int(codes[i])],
            final_state=pos[i].copy(),
        )
        for i in range(M)
    ]
    return RolloutBatch(trajs, gamma, beta)


def trajectory_success(traj: Trajectory, task: TaskSpec) -> bool:
    if traj.done_reason != "horizon":
        return False
    err = np.linalg.norm(traj.positions - task.target, axis=1)
    if task.reward_kind == "dense":
        n_tail = max(1, int(round(task.tail_fraction * err.size)))
        return bool(err[-n_tail:].mean() <= task.success_threshold)
    return bool(err[-1] <= task.success_threshold)


def success_rate(batch: RolloutBatch | Iterable[Trajectory], task: TaskSpec) -> float:
    """Fraction of trajectories meeting the task's success predicate.

    Dense-reward tasks use the mean position error over the final
    ``tail_fraction`` of the episode, sparse-reward tasks the final error;
    collisions and divergences always fail.
    """
    trajs = batch.trajectories if isinstance(batch, RolloutBatch) else list(batch)
    if not trajs:
        raise InputError("success rate of an empty batch")
    return sum(trajectory_success(t, task) for t in trajs) / len(trajs)


# -- demonstrations --------------------------------------------------------


def _speed_factor(arc: np.ndarray, corners: np.ndarray, length: float,
                  approach: float, corner_speed: float, corner_radius: float) -> np.ndarray:
    f = np.minimum(1.0, (length - arc) / approach)
    for c in corners:
        f = f * np.minimum(1.0, corner_speed + (1.0 - corner_speed) * np.abs(arc - c) / corner_radius)
    return f


def demo_profile(
    waypoints,
    T: int,
    dt: float,
    move_fraction: float = 0.8,
    approach: float = 2.0,
    corner_speed: float = 0.3,
    corner_radius: float = 1.5,
) -> np.ndarray:
    """T + 1 positions along a polyline.

    Speed is a constant cruise value, reduced to ``corner_speed`` times
    cruise at interior waypoints and decaying linearly with the remaining
    distance over the last ``approach`` units, so the endpoint is an
    exponential attractor.  The cruise speed is chosen so that the path is
    within 5% of ``approach`` of its end after ``move_fraction * T`` steps.
    """
    wp = np.asarray(waypoints, dtype=float)
    seg_len = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    length = cum[-1]
    if length <= 0:
        return np.repeat(wp[:1], T + 1, axis=0)
    approach = min(approach, length)
    corners = cum[1:-1]
    grid = np.linspace(0.0, length - 0.05 * approach, 4001)
    inv = 1.0 / _speed_factor(grid, corners, length, approach, corner_speed, corner_radius)
    travel = np.sum(0.5 * (inv[1:] + inv[:-1]) * np.diff(grid))
    cruise = travel / (move_fraction * T * dt)

    arc = np.zeros(T + 1)
    for t in range(T):
        f = _speed_factor(arc[t : t + 1], corners, length, approach, corner_speed, corner_radius)[0]
        arc[t + 1] = min(length, arc[t] + dt * cruise * f)
    idx = np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(seg_len) - 1)
    frac = (arc - cum[idx]) / np.where(seg_len[idx] > 0, seg_len[idx], 1.0)
    return wp[idx] + frac[:, None] * (wp[idx + 1] - wp[idx])


def demo_generate(
    task: TaskSpec,
    n_demos: int | None = None,
    rng: np.random.Generator | None = None,
    noise_scale: float = 0.2,
    **profile,
) -> list[Trajectory]:
    """Synthetic demonstrations along the task's waypoint polylines.

    Every waypoint after the start is perturbed by isotropic Gaussian noise
    of std ``noise_scale`` and traversed with :func:`demo_profile`
    (keyword arguments are forwarded to it).  Actions are forward finite
    differences, and the stored states are the Euler iterates of those
    actions, so replaying a demo in the environment reproduces it.
    Rewards are zero.
    """
    n_demos = task.n_demos if n_demos is None else n_demos
    if n_demos < 1:
        raise InputError("need at least one demonstration")
    if not task.demo_paths:
        raise InputError("task has no demonstration paths")
    rng = np.random.default_rng() if rng is None else rng
    T = task.horizon
    demos = []
    for i in range(n_demos):
        wp = np.array(task.demo_paths[i % len(task.demo_paths)], dtype=float)
        if noise_scale > 0:
            wp[1:] += noise_scale * rng.standard_normal(wp[1:].shape)
        pos = demo_profile(wp, T, task.dt, **profile)
        act = np.diff(pos, axis=0) / task.dt
        states = np.empty((T + 1, task.d))
        states[0] = pos[0]
        for t in range(T):
            states[t + 1] = states[t] + task.dt * act[t]
        demos.append(Trajectory(states[:-1], act, np.zeros(T), final_state=states[-1]))
    return demos


def desired_branch_weight(policy: Gmm, demos: list[Trajectory], task: TaskSpec) -> float:
    """Total weight of the components that model the branch leading to the target.

    Demos are assigned to the demo path they were generated from (they
    alternate between paths), and each component to the path that carries
    most of its joint responsibility over the demo samples.  The desired
    path is the one whose end point is closest to ``task.target``.
    """
    n_paths = len(task.demo_paths)
    if n_paths == 0:
        raise InputError("task has no demonstration paths")
    ends = np.array([path[-1] for path in task.demo_paths])
    desired = int(np.argmin(np.linalg.norm(ends - task.target, axis=1)))
    log_w = np.log(np.maximum(policy.weights, 1e-300))
    mass = np.zeros((n_paths, policy.n_components))
    for i, demo in enumerate(demos):
        x = np.hstack([demo.states, demo.actions])
        lj = component_logpdfs(x, policy.means, policy.covs) + log_w
        mass[i % n_paths] += np.exp(lj - logsumexp(lj, axis=1, keepdims=True)).sum(axis=0)
    owner = np.argmax(mass, axis=0)
    return float(policy.weights[owner == desired].sum())


def demos_to_dataset(demos: Iterable[Trajectory]) -> np.ndarray:
    """Stack demos into joint ``[state | action]`` rows for EM."""
    return np.vstack([np.hstack([d.states, d.actions]) for d in demos])


# -- JSON-lines dump -------------------------------------------------------


def trajectory_to_record(traj: Trajectory, task_name: str, seed) -> dict:
    steps = [
        [*map(float, s), *map(float, a), float(r)]
        for s, a, r in zip(traj.states, traj.actions, traj.rewards)
    ]
    rec = {"task": task_name, "seed": seed, "steps": steps, "done_reason": traj.done_reason}
    if traj.final_state is not None:
        rec["final_state"] = traj.final_state.tolist()
    return rec


def record_to_trajectory(rec: dict, d: int) -> Trajectory:
    steps = np.asarray(rec["steps"], dtype=float)
    if steps.ndim != 2 or steps.shape[1] != 2 * d + 1:
        raise InputError(f"trajectory record has step width {steps.shape}, expected {2 * d + 1}")
    reason = rec.get("done_reason", "horizon")
    return Trajectory(
        steps[:, :d], steps[:, d : 2 * d], steps[:, -1],
        terminated_early=reason != "horizon", done_reason=reason,
        final_state=rec.get("final_state"),
    )


def dump_jsonl(path, trajs: Iterable[Trajectory], task_name: str, seed) -> None:
    with open(path, "w") as fh:
        for t in trajs:
            fh.write(json.dumps(trajectory_to_record(t, task_name, seed)) + "\n")


def load_jsonl(path, d: int) -> list[Trajectory]:
    with open(path) as fh:
        return [record_to_trajectory(json.loads(line), d) for line in fh if line.strip()]
