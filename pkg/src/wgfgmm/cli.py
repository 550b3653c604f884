"""Command-line entry point: demo generation, EM fit, optimization, evaluation.

Verbs::

    wgfgmm demo-gen --task reaching --seed 0 --out runs/
    wgfgmm fit --task reaching --seed 0 --out runs/
    wgfgmm optimize --task reaching --seed 0-4 --out runs/
    wgfgmm evaluate --task reaching --policy runs/policy_reaching.json

A JSON config (``--config``) may override any field of :class:`RunConfig`;
command-line flags override the config.  Exit codes: 0 success, 2 input
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import (
    PRESETS,
    TaskSpec,
    demo_generate,
    demos_to_dataset,
    dump_jsonl,
    load_jsonl,
    rollout,
    success_rate,
    task_preset,
)
from .errors import InputError, NumericError
from .gmm import Gmm, em_fit
from .optimizer import METRICS_HEADER, OptimizerConfig, SuccessWindow, optimize

log = logging.getLogger("wgfgmm")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
MODE_ALIASES = {"riemannian": "riemannian", "ablation": "cholesky_ablation",
                "cholesky_ablation": "cholesky_ablation"}
EVAL_SCHEMA = ("task", "adapted", "episodes", "seed", "success_rate", "mean_final_error",
               "collision_rate", "divergence_rate")

# Per-task settings found by the acceptance runs.  Multi-goal adapts mostly
# through the weights, which needs room to move mass between the branches.
TASK_OPTIMIZER = {
    "reaching": {"tau": 100.0, "episodes_per_iter": 5},
    "collision": {"tau": 100.0},
    "multigoal": {"tau": 100.0, "c_max": 0.02, "w2_trust_radius": 20.0, "weight_lr": 0.3,
                  "inner_patience": 10},
}
TASK_BUDGET = {"reaching": 150_000, "collision": 200_000, "multigoal": 200_000}
TASK_SUCCESS_WINDOW = {"reaching": 2, "collision": 3, "multigoal": 3}


@dataclass
class FitConfig:
    state_reg: float = 1e-3
    action_reg: float = 0.25
    noise_scale: float = 0.2
    max_iters: int = 200
    tol: float = 1e-6
    n_init: int = 3


@dataclass
class RunConfig:
    task_name: str
    task: TaskSpec
    optimizer: OptimizerConfig
    n_components: int
    n_demos: int
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    max_env_steps: int = 200_000
    output_dir: Path = Path("runs")
    fit: FitConfig = field(default_factory=FitConfig)
    eval_episodes: int = 100
    success_window: int = 3

    def __post_init__(self):
        if not self.seeds:
            raise InputError("at least one seed is required")
        if self.max_env_steps <= 0:
            raise InputError("max_env_steps must be positive")
        if self.n_components < 1 or self.n_demos < 1 or self.eval_episodes < 1:
            raise InputError("component, demo and episode counts must be >= 1")
        self.output_dir = Path(self.output_dir)

    @property
    def original_task(self) -> TaskSpec:
        """The task the demonstrations solve."""
        if self.task_name in PRESETS:
            return task_preset(self.task_name, adapted=False)
        return self.task

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["output_dir"] = str(self.output_dir)
        return doc


def build_config(task_name: str, overrides: dict | None = None) -> RunConfig:
    """Preset defaults for ``task_name`` with a (nested) override dict applied."""
    doc = dict(overrides or {})
    task_name = doc.pop("task_name", task_name)
    if task_name not in PRESETS:
        raise InputError(f"unknown task preset {task_name!r}; choose from {sorted(PRESETS)}")
    task_doc = doc.pop("task", None)
    task = task_preset(task_name) if task_doc is None else TaskSpec.from_dict(task_doc)
    opt = {**TASK_OPTIMIZER[task_name], **doc.pop("optimizer", {})}
    fit = FitConfig(**doc.pop("fit", {}))
    known = {"seeds", "max_env_steps", "output_dir", "n_components", "n_demos",
             "eval_episodes", "success_window"}
    unknown = set(doc) - known
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(
        task_name=task_name,
        task=task,
        optimizer=OptimizerConfig(**opt),
        n_components=doc.pop("n_components", task.n_components),
        n_demos=doc.pop("n_demos", task.n_demos),
        max_env_steps=doc.pop("max_env_steps", TASK_BUDGET[task_name]),
        success_window=doc.pop("success_window", TASK_SUCCESS_WINDOW[task_name]),
        fit=fit,
        **doc,
    )


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0,2,5"`` or ``"0-4"``."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise InputError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise InputError("empty seed list")
    return seeds


# -- file helpers ----------------------------------------------------------


def _demo_path(cfg: RunConfig) -> Path:
    return cfg.output_dir / f"demos_{cfg.task_name}.jsonl"


def _policy_path(cfg: RunConfig) -> Path:
    return cfg.output_dir / f"policy_{cfg.task_name}.json"


def _mode_tag(mode: str) -> str:
    return "riemannian" if mode == "riemannian" else "ablation"


def load_policy(path) -> Gmm:
    try:
        return Gmm.from_json(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"policy file {path} not found") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"malformed policy file {path}: {exc}") from None


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from None


# -- commands --------------------------------------------------------------


def cmd_demo_gen(cfg: RunConfig, seed: int) -> Path:
    task = cfg.original_task
    demos = demo_generate(task, cfg.n_demos, np.random.default_rng(seed), cfg.fit.noise_scale)
    path = _demo_path(cfg)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        dump_jsonl(path, demos, cfg.task_name, seed)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from None
    return path


def fit_policy(cfg: RunConfig, demos, seed: int) -> Gmm:
    d = cfg.task.d
    reg = [cfg.fit.state_reg] * d + [cfg.fit.action_reg] * d
    return em_fit(
        demos_to_dataset(demos), cfg.n_components, np.random.default_rng(seed),
        max_iters=cfg.fit.max_iters, tol=cfg.fit.tol, reg_covar=reg, n_init=cfg.fit.n_init,
    )


def cmd_fit(cfg: RunConfig, seed: int, demo_path=None) -> Path:
    demo_path = Path(demo_path) if demo_path else _demo_path(cfg)
    try:
        demos = load_jsonl(demo_path, cfg.task.d)
    except FileNotFoundError:
        raise InputError(f"demo file {demo_path} not found; run demo-gen first") from None
    except (ValueError, KeyError) as exc:
        raise InputError(f"malformed demo file {demo_path}: {exc}") from None
    if not demos:
        raise InputError(f"demo file {demo_path} is empty")
    gmm = fit_policy(cfg, demos, seed)
    path = _policy_path(cfg)
    _write_text(path, gmm.to_json())
    return path


def cmd_optimize(cfg: RunConfig, policy_path=None) -> dict:
    """Optimize the fitted policy once per seed; write metrics, policies and a summary."""
    policy = load_policy(policy_path or _policy_path(cfg))
    tag = _mode_tag(cfg.optimizer.mode)
    criterion = SuccessWindow(0.9, cfg.success_window)
    runs = []
    for seed in cfg.seeds:
        csv_path = cfg.output_dir / f"metrics_{cfg.task_name}_{tag}_seed{seed}.csv"
        entry = {"seed": seed, "metrics_csv": csv_path.name}
        try:
            csv_path.parent.mkdir(parents=True, exist_ok=True)
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(METRICS_HEADER)
                res = optimize(
                    policy, cfg.task, cfg.optimizer, np.random.default_rng(seed),
                    criterion, cfg.max_env_steps, writer, record_constraint=True,
                )
        except NumericError as exc:
            log.error("seed %d failed: %s", seed, exc)
            entry.update(status="numeric_failure", error=str(exc), converged=False)
            runs.append(entry)
            continue
        except OSError as exc:
            raise InputError(f"cannot write {csv_path}: {exc}") from None
        out_policy = cfg.output_dir / f"policy_{cfg.task_name}_{tag}_seed{seed}.json"
        _write_text(out_policy, res.policy.to_json())
        entry.update(
            status="ok",
            converged=res.converged,
            env_steps=res.env_steps,
            convergence_step=res.env_steps if res.converged else None,
            first_full_success_step=res.first_full_success_step,
            numeric_aborts=res.numeric_aborts,
            max_accepted_w2=max(res.accepted_w2, default=0.0),
            wallclock_s=res.metrics[-1]["wallclock_s"] if res.metrics else 0.0,
            policy=out_policy.name,
            success_curve=[[r["env_steps"], r["success_rate"]] for r in res.metrics],
        )
        runs.append(entry)
    summary = {
        "task": cfg.task_name,
        "mode": cfg.optimizer.mode,
        "max_env_steps": cfg.max_env_steps,
        "n_converged": sum(bool(r.get("converged")) for r in runs),
        "runs": runs,
    }
    _write_text(cfg.output_dir / f"summary_{cfg.task_name}_{tag}.json", json.dumps(summary, indent=2))
    return summary


def evaluate_policy(policy: Gmm, task: TaskSpec, episodes: int, seed: int) -> dict:
    batch = rollout(policy, task.split, task, episodes, np.random.default_rng(seed))
    finals = np.array([t.positions[-1] for t in batch.trajectories])
    reasons = [t.done_reason for t in batch.trajectories]
    return {
        "episodes": episodes,
        "seed": seed,
        "success_rate": success_rate(batch, task),
        "mean_final_error": float(np.linalg.norm(finals - task.target, axis=1).mean()),
        "collision_rate": reasons.count("collision") / episodes,
        "divergence_rate": reasons.count("divergence") / episodes,
    }


def cmd_evaluate(cfg: RunConfig, seed: int, policy_path=None, original: bool = False) -> dict:
    policy = load_policy(policy_path or _policy_path(cfg))
    task = cfg.original_task if original else cfg.task
    report = {"task": cfg.task_name, "adapted": not original}
    report.update(evaluate_policy(policy, task, cfg.eval_episodes, seed))
    return {k: report[k] for k in EVAL_SCHEMA}


# -- argument parsing ------------------------------------------------------


def _load_config_file(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from None


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding RunConfig fields")
    common.add_argument("--task", choices=sorted(PRESETS), help="task preset")
    common.add_argument("--seed", default=None, help="seed, list '0,1' or range '0-4'")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--max-env-steps", type=int, default=None)
    common.add_argument("--mode", choices=sorted(MODE_ALIASES), default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wgfgmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("demo-gen", parents=[common], help="generate synthetic demonstrations")
    fit = sub.add_parser("fit", parents=[common], help="fit the joint GMM by EM")
    fit.add_argument("--demos", help="demo file (default: <out>/demos_<task>.jsonl)")
    opt = sub.add_parser("optimize", parents=[common], help="adapt the policy, one run per seed")
    opt.add_argument("--policy", help="policy file (default: <out>/policy_<task>.json)")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluation rollouts of a policy")
    ev.add_argument("--policy", help="policy file (default: <out>/policy_<task>.json)")
    ev.add_argument("--episodes", type=int, default=None)
    ev.add_argument("--original", action="store_true", help="evaluate on the demonstrated task")
    return parser


def _resolve(args) -> RunConfig:
    doc = _load_config_file(args.config) if args.config else {}
    task_name = args.task or doc.get("task_name")
    if task_name is None:
        raise InputError("a task is required (--task or task_name in the config)")
    doc.pop("task_name", None)
    if args.out is not None:
        doc["output_dir"] = args.out
    if args.max_env_steps is not None:
        doc["max_env_steps"] = args.max_env_steps
    if args.seed is not None:
        doc["seeds"] = parse_seeds(args.seed)
    if args.mode is not None:
        doc["optimizer"] = {**doc.get("optimizer", {}), "mode": MODE_ALIASES[args.mode]}
    if getattr(args, "episodes", None) is not None:
        doc["eval_episodes"] = args.episodes
    try:
        return build_config(task_name, doc)
    except TypeError as exc:
        raise InputError(f"invalid configuration: {exc}") from None


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        seed = cfg.seeds[0]
        if args.command == "demo-gen":
            print(cmd_demo_gen(cfg, seed))
        elif args.command == "fit":
            print(cmd_fit(cfg, seed, args.demos))
        elif args.command == "optimize":
            summary = cmd_optimize(cfg, args.policy)
            print(json.dumps({k: summary[k] for k in ("task", "mode", "n_converged")}))
        else:
            print(json.dumps(cmd_evaluate(cfg, seed, args.policy, args.original)))
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
