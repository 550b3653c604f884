import csv
import json
import subprocess
import sys

import pytest

from wgfgmm import cli
from wgfgmm.errors import NotPositiveDefiniteError
from wgfgmm.gmm import Gmm
from wgfgmm.optimizer import METRICS_HEADER


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def reaching_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("reaching")
    assert cli.main(["demo-gen", "--task", "reaching", "--seed", "0", "--out", str(out)]) == 0
    assert cli.main(["fit", "--task", "reaching", "--seed", "0", "--out", str(out)]) == 0
    return out


@pytest.mark.parametrize("task,count", [("reaching", 12), ("collision", 10), ("multigoal", 12)])
def test_demo_gen_counts(tmp_path, capsys, task, count):
    code, out, _ = run(capsys, "demo-gen", "--task", task, "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / f"demos_{task}.jsonl").read_text().splitlines()
    assert len(lines) == count
    assert json.loads(lines[0])["task"] == task


def test_fit_writes_policy_deterministically(reaching_dir, capsys):
    path = reaching_dir / "policy_reaching.json"
    first = path.read_bytes()
    assert Gmm.from_json(first.decode()).n_components == 7
    code, _, _ = run(capsys, "fit", "--task", "reaching", "--seed", "0", "--out", reaching_dir)
    assert code == 0
    assert path.read_bytes() == first


def test_fit_rejects_too_many_components(reaching_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_components": 100_000}))
    code, _, err = run(capsys, "fit", "--task", "reaching", "--config", cfg,
                       "--demos", reaching_dir / "demos_reaching.jsonl", "--out", tmp_path)
    assert code == 2
    assert "input error" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["fit", "--task", "reaching"],  # no demos in the output dir
        ["evaluate", "--task", "reaching"],  # no policy
        ["demo-gen", "--task", "juggling"],
        ["demo-gen", "--task", "reaching", "--seed", "x"],
        ["demo-gen", "--task", "reaching", "--config", "missing.json"],
        ["demo-gen"],
        ["explode"],
    ],
)
def test_input_errors_exit_2(tmp_path, capsys, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert run(capsys, *argv)[0] == 2


def test_bad_config_exits_2(tmp_path, capsys):
    for doc in ('{"colour": 1}', "{not json", '{"optimizer": {"tau": -1}}', '{"seeds": []}'):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(doc)
        assert run(capsys, "demo-gen", "--task", "reaching", "--config", cfg, "--out", tmp_path)[0] == 2


def test_numeric_failure_exits_3(reaching_dir, tmp_path, capsys, monkeypatch):
    def broken(*args, **kwargs):
        raise NotPositiveDefiniteError("covariance lost definiteness")

    monkeypatch.setattr(cli, "em_fit", broken)
    code, _, err = run(capsys, "fit", "--task", "reaching", "--out", tmp_path,
                       "--demos", reaching_dir / "demos_reaching.jsonl")
    assert code == 3
    assert "numeric failure" in err


def test_parse_seeds():
    assert cli.parse_seeds("3") == [3]
    assert cli.parse_seeds("0,2") == [0, 2]
    assert cli.parse_seeds("0-4") == [0, 1, 2, 3, 4]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = cli.build_config("collision", {"optimizer": {"tau": 5.0}, "seeds": [7]})
    assert cfg.optimizer.tau == 5.0 and cfg.seeds == [7]
    assert cfg.max_env_steps == cli.TASK_BUDGET["collision"]
    assert cfg.n_components == 3 and cfg.n_demos == 10
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seeds": [7], "max_env_steps": 10}))
    args = cli.make_parser().parse_args(
        ["optimize", "--task", "reaching", "--config", str(path), "--seed", "1,2", "--mode", "ablation"]
    )
    resolved = cli._resolve(args)
    assert resolved.seeds == [1, 2]
    assert resolved.max_env_steps == 10
    assert resolved.optimizer.mode == "cholesky_ablation"


@pytest.mark.parametrize("mode,tag", [("riemannian", "riemannian"), ("ablation", "ablation")])
def test_optimize_tiny_budget(reaching_dir, tmp_path, capsys, mode, tag):
    code, out, _ = run(
        capsys, "optimize", "--task", "reaching", "--seed", "0-4", "--max-env-steps", 1,
        "--mode", mode, "--policy", reaching_dir / "policy_reaching.json", "--out", tmp_path,
    )
    assert code == 0
    assert json.loads(out)["n_converged"] == 0
    summary = json.loads((tmp_path / f"summary_reaching_{tag}.json").read_text())
    assert [r["seed"] for r in summary["runs"]] == [0, 1, 2, 3, 4]
    assert not any(r["converged"] for r in summary["runs"])
    for seed in range(5):
        with open(tmp_path / f"metrics_reaching_{tag}_seed{seed}.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == METRICS_HEADER
        assert len(rows) == 2
        assert (tmp_path / f"policy_reaching_{tag}_seed{seed}.json").exists()


def test_evaluate_reports(reaching_dir, capsys):
    code, out, _ = run(capsys, "evaluate", "--task", "reaching", "--original", "--out", reaching_dir)
    assert code == 0
    report = json.loads(out)
    assert tuple(report) == cli.EVAL_SCHEMA
    assert report["episodes"] == 100 and report["adapted"] is False
    assert report["success_rate"] >= 0.9

    code, out2, _ = run(capsys, "evaluate", "--task", "reaching", "--out", reaching_dir)
    adapted = json.loads(out2)
    assert adapted["adapted"] is True
    assert adapted["success_rate"] <= 0.1

    assert run(capsys, "evaluate", "--task", "reaching", "--original", "--out", reaching_dir)[1] == out


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "wgfgmm", "demo-gen", "--task", "collision", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert (tmp_path / "demos_collision.jsonl").exists()
