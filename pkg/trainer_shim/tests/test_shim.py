from __future__ import annotations

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from trainer_shim.schema import SchemaError, load_training_file
from trainer_shim.trainer import missing_dependencies

GOLDEN = Path(__file__).parent / "golden" / "finetune_payload.golden.jsonl"


def payload_line(answer="A", question="What is one plus one?"):
    return json.dumps(
        {
            "messages": [
                {"role": "system", "content": "You are an expert in the question answering."},
                {"role": "user", "content": question},
                {"role": "assistant", "content": f"Answer: {answer}"},
            ]
        }
    )


def write_train_file(path: Path, lines=20) -> Path:
    path.write_text(
        "\n".join(payload_line(question=f"Question {i}?") for i in range(lines)) + "\n",
        encoding="utf-8",
    )
    return path


def run_shim(env_overrides: dict, *flags: str, drop: tuple[str, ...] = ()):
    env = {
        key: value
        for key, value in os.environ.items()
        if not key.startswith("SEMIEVOL_")
    }
    env.update(env_overrides)
    for name in drop:
        env.pop(name, None)
    return subprocess.run(
        [sys.executable, "-m", "trainer_shim", *flags],
        env=env,
        capture_output=True,
        text=True,
        timeout=120,
    )


def standard_env(tmp_path: Path, lines=20) -> dict:
    train = write_train_file(tmp_path / "train.jsonl", lines)
    return {
        "SEMIEVOL_TRAIN_FILE": str(train),
        "SEMIEVOL_BASE_MODEL": "demo-base",
        "SEMIEVOL_EPOCHS": "2",
        "SEMIEVOL_OUT_DIR": str(tmp_path / "out"),
    }


class TestEnvironmentContract:
    @pytest.mark.parametrize(
        "variable",
        ["SEMIEVOL_TRAIN_FILE", "SEMIEVOL_BASE_MODEL", "SEMIEVOL_EPOCHS", "SEMIEVOL_OUT_DIR"],
    )
    def test_missing_variable_exits_1_and_names_it(self, tmp_path, variable):
        env = standard_env(tmp_path)
        env.pop(variable)
        result = run_shim(env, "--dry-run")
        assert result.returncode == 1
        assert variable in result.stderr

    def test_non_integer_epochs_exits_1(self, tmp_path):
        env = standard_env(tmp_path)
        env["SEMIEVOL_EPOCHS"] = "two"
        result = run_shim(env, "--dry-run")
        assert result.returncode == 1
        assert "SEMIEVOL_EPOCHS" in result.stderr

    def test_zero_epochs_rejected(self, tmp_path):
        env = standard_env(tmp_path)
        env["SEMIEVOL_EPOCHS"] = "0"
        result = run_shim(env, "--dry-run")
        assert result.returncode == 1


class TestDryRun:
    def test_valid_file_prints_dry_run_ok(self, tmp_path):
        env = standard_env(tmp_path)
        result = run_shim(env, "--dry-run")
        assert result.returncode == 0
        assert result.stdout.strip().splitlines()[-1] == "dry-run-ok"
        assert not (tmp_path / "out").exists()

    def test_schema_violation_exits_1_naming_line(self, tmp_path):
        env = standard_env(tmp_path)
        bad = tmp_path / "bad.jsonl"
        bad.write_text(payload_line() + "\n" + '{"messages": []}\n', encoding="utf-8")
        env["SEMIEVOL_TRAIN_FILE"] = str(bad)
        result = run_shim(env, "--dry-run")
        assert result.returncode == 1
        assert "line 2" in result.stderr

    def test_missing_messages_key(self, tmp_path):
        env = standard_env(tmp_path)
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"prompt": "x"}\n', encoding="utf-8")
        env["SEMIEVOL_TRAIN_FILE"] = str(bad)
        result = run_shim(env, "--dry-run")
        assert result.returncode == 1
        assert "messages" in result.stderr


class TestStubTrainer:
    def test_run_prints_model_id_and_writes_artifacts(self, tmp_path):
        env = standard_env(tmp_path)
        result = run_shim(env, "--stub")
        assert result.returncode == 0
        lines = [line for line in result.stdout.splitlines() if line.strip()]
        identifier = lines[-1]
        assert identifier.startswith("demo-base-lora-")
        out = tmp_path / "out"
        assert (out / "adapter" / "adapter_model.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mode"] == "stub"
        assert manifest["examples"] == 20
        assert manifest["epochs"] == 2
        assert manifest["learning_rate"] == pytest.approx(1e-4)
        assert manifest["gradient_accumulation_steps"] == 8
        assert manifest["adapter"]["method"] == "lora"

    def test_model_id_is_deterministic_in_content(self, tmp_path):
        env = standard_env(tmp_path)
        first = run_shim(env, "--stub").stdout.splitlines()[-1]
        second = run_shim(env, "--stub").stdout.splitlines()[-1]
        assert first == second

    def test_real_path_without_dependencies_exits_1(self, tmp_path):
        if not missing_dependencies():
            pytest.skip("training dependencies installed; the real path would start")
        env = standard_env(tmp_path)
        result = run_shim(env)
        assert result.returncode == 1
        assert "dependencies" in result.stderr


class TestSharedGolden:
    def test_orchestrator_payload_golden_validates(self):
        examples = load_training_file(GOLDEN)
        assert len(examples) == 1
        assert examples[0].target == "Answer: B"
        assert examples[0].messages[0]["role"] == "system"

    def test_schema_module_rejects_non_assistant_tail(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            json.dumps({"messages": [{"role": "user", "content": "q"}]}) + "\n",
            encoding="utf-8",
        )
        with pytest.raises(SchemaError):
            load_training_file(path)


class TestOrchestratorIntegration:
    def test_command_mode_warmup_completes_via_stub_shim(self, tmp_path):
        semievol = pytest.importorskip(
            "semievol_forge", reason="orchestrator not installed alongside the shim"
        )
        from semievol_forge.backends.command import CommandFineTuner
        from semievol_forge.backends.types import ModelRef
        from semievol_forge.pipeline import Pipeline, PipelineConfig
        from semievol_forge.simlab.backend import SIM_BASE_MODEL, SimulatedBackend
        from semievol_forge.simlab.harness import prepare_workdir
        from semievol_forge.simlab.world import OracleSpec, SyntheticWorld

        world = SyntheticWorld(clusters=3, per_cluster=10, seed=7, oracle=OracleSpec(seed=7))
        workdir = tmp_path / "run"
        prepare_workdir(workdir, world, split_seed=7)
        backend = SimulatedBackend(world, state_path=workdir / "sim_models.json")
        finetuner = CommandFineTuner(
            [sys.executable, "-m", "trainer_shim", "--stub"], workdir / "models"
        )
        pipe = Pipeline(
            workdir,
            backend,
            ModelRef(name=SIM_BASE_MODEL, role="base"),
            PipelineConfig(seed=7, concurrency=2),
            finetuner=finetuner,
        )
        state = pipe.run_until("warmed")
        assert state.stage == "warmed"
        assert state.models["warm"].startswith(f"{SIM_BASE_MODEL}-lora-")
        manifests = list((workdir / "models").glob("*/manifest.json"))
        assert len(manifests) == 1
        assert json.loads(manifests[0].read_text())["mode"] == "stub"
