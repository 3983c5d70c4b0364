"""Command-mode fine-tuning: delegate training to an external process.

The configured command is invoked with the environment variables
SEMIEVOL_TRAIN_FILE, SEMIEVOL_BASE_MODEL, SEMIEVOL_EPOCHS and
SEMIEVOL_OUT_DIR set. Exit code 0 means success and the last non-empty
stdout line is taken as the new model identifier; any other exit code fails
the job with captured stderr. The command runs synchronously, so polling is
a no-op.
"""
from __future__ import annotations

import os
import shlex
import subprocess
import uuid
from pathlib import Path

from ..errors import ValidationError
from .types import FineTuneJob, ModelRef, validate_chat_payload

ENV_TRAIN_FILE = "SEMIEVOL_TRAIN_FILE"
ENV_BASE_MODEL = "SEMIEVOL_BASE_MODEL"
ENV_EPOCHS = "SEMIEVOL_EPOCHS"
ENV_OUT_DIR = "SEMIEVOL_OUT_DIR"


class CommandFineTuner:
    """Runs one external training command per fine-tune job."""

    def __init__(self, command: list[str] | str, out_root: str | Path, timeout: float = 3600.0):
        if isinstance(command, str):
            command = shlex.split(command)
        if not command:
            raise ValidationError("fine-tune command must be non-empty")
        self.command = list(command)
        self.out_root = Path(out_root)
        self.timeout = timeout
        self.name = f"command:{self.command[0]}"

    def capabilities(self) -> frozenset[str]:
        return frozenset({"finetune"})

    def start_finetune(
        self, base: ModelRef, training_file: str | Path, epochs: int, result_role: str = "warm"
    ) -> FineTuneJob:
        validate_chat_payload(training_file)
        job_id = f"cmd-{uuid.uuid4().hex[:12]}"
        out_dir = self.out_root / job_id
        out_dir.mkdir(parents=True, exist_ok=True)
        env = dict(os.environ)
        env.update(
            {
                ENV_TRAIN_FILE: str(Path(training_file).resolve()),
                ENV_BASE_MODEL: base.name,
                ENV_EPOCHS: str(epochs),
                ENV_OUT_DIR: str(out_dir.resolve()),
            }
        )
        proc = subprocess.run(
            self.command,
            env=env,
            capture_output=True,
            text=True,
            timeout=self.timeout,
        )
        if proc.returncode != 0:
            return FineTuneJob(
                id=job_id,
                base=base,
                training_file=str(training_file),
                epochs=epochs,
                status="failed",
                error=f"command exited {proc.returncode}: {proc.stderr.strip()}",
            )
        lines = [line.strip() for line in proc.stdout.splitlines() if line.strip()]
        if not lines:
            return FineTuneJob(
                id=job_id,
                base=base,
                training_file=str(training_file),
                epochs=epochs,
                status="failed",
                error="command printed no model identifier on stdout",
            )
        result = ModelRef(name=lines[-1], role=result_role, backend=self.name, job_id=job_id)
        return FineTuneJob(
            id=job_id,
            base=base,
            training_file=str(training_file),
            epochs=epochs,
            status="succeeded",
            result=result,
        )

    def poll_finetune(self, job: FineTuneJob) -> FineTuneJob:
        return job
