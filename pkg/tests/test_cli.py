from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from semievol_forge.cli import main
from semievol_forge.pipeline import FILES


@pytest.fixture
def runner():
    return CliRunner()


def write_config(path: Path, workdir: Path, **run_overrides) -> Path:
    run_lines = "\n".join(
        f"{key} = {json.dumps(value)}" for key, value in run_overrides.items()
    )
    path.write_text(
        f"""
[run]
workdir = "{workdir.as_posix()}"
seed = 5
{run_lines}

[backend]
mode = "simulated"

[simulated]
clusters = 4
per_cluster = 15
world_seed = 5
""",
        encoding="utf-8",
    )
    return path


def bootstrap(runner, tmp_path, **run_overrides):
    workdir = tmp_path / "run"
    config = write_config(tmp_path / "run.toml", workdir, **run_overrides)
    tasks = tmp_path / "tasks.jsonl"
    generated = runner.invoke(main, ["--config", str(config), "simlab", "--out", str(tasks)])
    assert generated.exit_code == 0, generated.output
    result = runner.invoke(
        main, ["--config", str(config), "split", "--input", str(tasks), "--ratio", "2:6:2"]
    )
    assert result.exit_code == 0, result.output
    return config, workdir


class TestSplitCommand:
    def test_split_writes_pools_and_config_echo(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        for name in ("labeled", "unlabeled", "sealed", "test"):
            assert (workdir / FILES[name]).exists()
        resolved = json.loads((workdir / "config_resolved.json").read_text())
        assert resolved["run"]["seed"] == 5

    def test_split_refuses_to_clobber_existing_run(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        result = runner.invoke(
            main, ["--config", str(config), "evolve"], catch_exceptions=False
        )
        assert result.exit_code == 0
        tasks = tmp_path / "tasks.jsonl"
        result = runner.invoke(
            main, ["--config", str(config), "split", "--input", str(tasks)]
        )
        assert result.exit_code == 1


class TestValidation:
    def test_theta_out_of_range_exits_1(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        result = runner.invoke(
            main, ["--config", str(config), "select", "--theta", "150"]
        )
        assert result.exit_code == 1
        assert "theta" in result.stderr

    def test_json_error_shape(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        result = runner.invoke(
            main, ["--config", str(config), "--json", "select", "--theta", "150"]
        )
        assert result.exit_code == 1
        payload = json.loads(result.output)
        assert payload["error"]["type"] == "ValidationError"
        assert "theta" in payload["error"]["message"]

    def test_missing_workdir_exits_1(self, runner):
        result = runner.invoke(main, ["warmup"])
        assert result.exit_code == 1

    def test_n_below_two_needs_ablate_flag(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path, n=1)
        result = runner.invoke(main, ["--config", str(config), "evolve"])
        assert result.exit_code == 1
        result = runner.invoke(
            main, ["--config", str(config), "evolve", "--ablate", "collab"]
        )
        assert result.exit_code == 0, result.output

    def test_backend_failure_exits_2(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        config.write_text(
            config.read_text().replace(
                'mode = "simulated"',
                'mode = "http"\nbase_url = "http://127.0.0.1:9"\nbase_model = "m"',
            ),
            encoding="utf-8",
        )
        result = runner.invoke(main, ["--config", str(config), "warmup"])
        assert result.exit_code == 2


class TestEvolve:
    def test_dry_run_prints_plan_without_calls(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        result = runner.invoke(main, ["--config", str(config), "evolve", "--dry-run"])
        assert result.exit_code == 0
        for stage in ("warmed", "inferred", "selected", "evolved", "evaluated"):
            assert stage in result.output
        assert not (workdir / FILES["journal"]).exists()

    def test_evolve_twice_is_identical(self, runner, tmp_path):
        artifacts = []
        for name in ("x", "y"):
            sub = tmp_path / name
            sub.mkdir()
            config, workdir = bootstrap(runner, sub)
            result = runner.invoke(main, ["--config", str(config), "evolve"])
            assert result.exit_code == 0, result.output
            artifacts.append(
                {
                    f: (workdir / FILES[f]).read_bytes()
                    for f in ("pseudo", "selected", "selection_report", "eval_report")
                }
            )
        assert artifacts[0] == artifacts[1]

    def test_stagewise_commands_advance(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        for command, stage in (
            ("warmup", "warmed"),
            ("infer", "justified"),
            ("select", "selected"),
            ("finetune", "evolved"),
            ("eval", "evaluated"),
        ):
            result = runner.invoke(main, ["--config", str(config), command])
            assert result.exit_code == 0, result.output
            state = json.loads((workdir / FILES["state"]).read_text())
            assert state["stage"] == stage


class TestIterate:
    def test_rounds_recorded_in_state(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        result = runner.invoke(main, ["--config", str(config), "iterate", "--rounds", "2"])
        assert result.exit_code == 0, result.output
        state = json.loads((workdir / FILES["state"]).read_text())
        assert [h["round"] for h in state["history"]] == [1, 2]

    def test_audit_command(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        result = runner.invoke(main, ["--config", str(config), "evolve"])
        assert result.exit_code == 0
        result = runner.invoke(main, ["--config", str(config), "audit"])
        assert result.exit_code == 0
        assert "isolation holds" in result.output


class TestTemplatesDir:
    def test_override_changes_rendered_prompts(self, runner, tmp_path):
        config, workdir = bootstrap(runner, tmp_path)
        overrides = tmp_path / "templates"
        overrides.mkdir()
        (overrides / "multiple_choice.txt").write_text(
            "Custom lead-in, reply with 'Answer: LETTER'.\n\n{question}\n{options}\n",
            encoding="utf-8",
        )
        result = runner.invoke(
            main,
            ["--config", str(config), "evolve", "--templates-dir", str(overrides)],
        )
        assert result.exit_code == 0, result.output
        payload = (workdir / "payloads" / "warmup-round-01.jsonl").read_text()
        assert "Custom lead-in" in payload


class TestSimlabCommand:
    def test_generates_task_file(self, runner, tmp_path):
        out = tmp_path / "world.jsonl"
        result = runner.invoke(
            main,
            ["simlab", "--clusters", "3", "--per-cluster", "4", "--world-seed", "2", "--out", str(out)],
        )
        assert result.exit_code == 0
        assert len(out.read_text().splitlines()) == 12
