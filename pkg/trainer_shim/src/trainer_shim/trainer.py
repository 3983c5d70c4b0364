"""Parameter-efficient training backends: a real LoRA run and a stub.

The stub performs no learning; it writes the same artifact layout (adapter
directory plus manifest) so the command contract is testable without GPUs.
The real path drives transformers + peft; its dependencies are checked up
front by the CLI before any work starts.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from importlib import util as importlib_util
from pathlib import Path

from .schema import TrainingExample

TRAINING_PACKAGES = ("torch", "transformers", "peft", "datasets")

DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_GRAD_ACCUM = 8


@dataclass(frozen=True)
class ShimConfig:
    train_file: Path
    base_model: str
    epochs: int
    out_dir: Path
    learning_rate: float = DEFAULT_LEARNING_RATE
    grad_accum_steps: int = DEFAULT_GRAD_ACCUM
    lora_r: int | None = None
    lora_alpha: int | None = None
    max_length: int = 1024


class TrainerError(RuntimeError):
    """Training crashed; the log path is in the message."""


def missing_dependencies() -> list[str]:
    return [name for name in TRAINING_PACKAGES if importlib_util.find_spec(name) is None]


def model_identifier(config: ShimConfig, content: bytes) -> str:
    digest = hashlib.blake2b(config.base_model.encode() + content, digest_size=5).hexdigest()
    return f"{config.base_model}-lora-{digest}"


def write_manifest(config: ShimConfig, examples: int, mode: str, adapter: dict) -> Path:
    """Record what was trained and with which adapter settings."""
    manifest = {
        "base_model": config.base_model,
        "train_file": str(config.train_file),
        "examples": examples,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "gradient_accumulation_steps": config.grad_accum_steps,
        "adapter": adapter,
        "mode": mode,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = config.out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def run_stub(config: ShimConfig, examples: list[TrainingExample]) -> str:
    """Contract-conformance path: artifact layout without any learning."""
    adapter_dir = config.out_dir / "adapter"
    adapter_dir.mkdir(parents=True, exist_ok=True)
    content = config.train_file.read_bytes()
    identifier = model_identifier(config, content)
    (adapter_dir / "adapter_model.json").write_text(
        json.dumps({"stub": True, "examples": len(examples)}), encoding="utf-8"
    )
    write_manifest(
        config,
        len(examples),
        mode="stub",
        adapter={"method": "lora", "r": config.lora_r, "alpha": config.lora_alpha},
    )
    return identifier


def run_lora(config: ShimConfig, examples: list[TrainingExample]) -> str:
    """Real low-rank-adaptation fine-tune via transformers + peft.

    Raises TrainerError with the log path on any training failure. Adapter
    rank and alpha fall back to the peft defaults when not given; whatever
    ends up effective is recorded in the manifest.
    """
    log_path = config.out_dir / "train.log"
    config.out_dir.mkdir(parents=True, exist_ok=True)
    try:
        import torch
        from datasets import Dataset as HFDataset
        from peft import LoraConfig, get_peft_model
        from transformers import (
            AutoModelForCausalLM,
            AutoTokenizer,
            DataCollatorForLanguageModeling,
            Trainer,
            TrainingArguments,
        )

        tokenizer = AutoTokenizer.from_pretrained(config.base_model)
        if tokenizer.pad_token is None:
            tokenizer.pad_token = tokenizer.eos_token
        model = AutoModelForCausalLM.from_pretrained(config.base_model)

        lora_kwargs = {"task_type": "CAUSAL_LM"}
        if config.lora_r is not None:
            lora_kwargs["r"] = config.lora_r
        if config.lora_alpha is not None:
            lora_kwargs["lora_alpha"] = config.lora_alpha
        lora_config = LoraConfig(**lora_kwargs)
        model = get_peft_model(model, lora_config)

        def to_text(example: TrainingExample) -> str:
            if hasattr(tokenizer, "apply_chat_template") and tokenizer.chat_template:
                return tokenizer.apply_chat_template(
                    list(example.messages), tokenize=False, add_generation_prompt=False
                )
            return "\n\n".join(m["content"] for m in example.messages)

        rows = [{"text": to_text(e)} for e in examples]

        def tokenize(batch):
            return tokenizer(
                batch["text"], truncation=True, max_length=config.max_length
            )

        dataset = HFDataset.from_list(rows).map(tokenize, batched=True, remove_columns=["text"])
        collator = DataCollatorForLanguageModeling(tokenizer, mlm=False)
        args = TrainingArguments(
            output_dir=str(config.out_dir / "checkpoints"),
            num_train_epochs=config.epochs,
            learning_rate=config.learning_rate,
            gradient_accumulation_steps=config.grad_accum_steps,
            per_device_train_batch_size=1,
            logging_dir=str(config.out_dir / "logs"),
            save_strategy="no",
            report_to=[],
            use_cpu=not torch.cuda.is_available(),
        )
        trainer = Trainer(model=model, args=args, train_dataset=dataset, data_collator=collator)
        trainer.train()

        adapter_dir = config.out_dir / "adapter"
        model.save_pretrained(str(adapter_dir))
        effective = {
            "method": "lora",
            "r": getattr(lora_config, "r", None),
            "alpha": getattr(lora_config, "lora_alpha", None),
        }
        write_manifest(config, len(examples), mode="lora", adapter=effective)
        return model_identifier(config, config.train_file.read_bytes())
    except Exception as e:  # noqa: BLE001 - every trainer failure maps to exit 3
        log_path.write_text(f"{type(e).__name__}: {e}\n", encoding="utf-8")
        raise TrainerError(f"training failed; log at {log_path}") from e
