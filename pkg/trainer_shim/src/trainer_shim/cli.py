"""Entry point implementing the command contract.

Environment interface: SEMIEVOL_TRAIN_FILE, SEMIEVOL_BASE_MODEL,
SEMIEVOL_EPOCHS, SEMIEVOL_OUT_DIR. On success the last non-empty stdout
line is the served-model identifier and the exit code is 0.

Exit codes: 1 for a missing environment variable (named in the message),
a schema violation (naming the line), or missing training dependencies;
3 for a trainer failure (with the captured log path).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .schema import SchemaError, load_training_file
from .trainer import (
    DEFAULT_GRAD_ACCUM,
    DEFAULT_LEARNING_RATE,
    ShimConfig,
    TrainerError,
    missing_dependencies,
    run_lora,
    run_stub,
)

ENV_TRAIN_FILE = "SEMIEVOL_TRAIN_FILE"
ENV_BASE_MODEL = "SEMIEVOL_BASE_MODEL"
ENV_EPOCHS = "SEMIEVOL_EPOCHS"
ENV_OUT_DIR = "SEMIEVOL_OUT_DIR"

REQUIRED_ENV = (ENV_TRAIN_FILE, ENV_BASE_MODEL, ENV_EPOCHS, ENV_OUT_DIR)


def _fail(message: str, code: int) -> int:
    print(f"trainer-shim: {message}", file=sys.stderr)
    return code


def config_from_env(args: argparse.Namespace) -> ShimConfig:
    values = {}
    for name in REQUIRED_ENV:
        value = os.environ.get(name, "")
        if not value:
            raise KeyError(name)
        values[name] = value
    try:
        epochs = int(values[ENV_EPOCHS])
    except ValueError:
        raise ValueError(f"{ENV_EPOCHS} must be an integer, got {values[ENV_EPOCHS]!r}") from None
    if epochs < 1:
        raise ValueError(f"{ENV_EPOCHS} must be >= 1, got {epochs}")
    return ShimConfig(
        train_file=Path(values[ENV_TRAIN_FILE]),
        base_model=values[ENV_BASE_MODEL],
        epochs=epochs,
        out_dir=Path(values[ENV_OUT_DIR]),
        learning_rate=args.learning_rate,
        grad_accum_steps=args.grad_accum_steps,
        lora_r=args.lora_r,
        lora_alpha=args.lora_alpha,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trainer-shim",
        description="Fine-tune a local model on a chat-format JSONL payload.",
    )
    parser.add_argument(
        "--dry-run",
        action="store_true",
        help="validate the payload schema and exit without training",
    )
    parser.add_argument(
        "--stub",
        action="store_true",
        help="skip real training; write artifacts and print a model id",
    )
    parser.add_argument("--learning-rate", type=float, default=DEFAULT_LEARNING_RATE)
    parser.add_argument("--grad-accum-steps", type=int, default=DEFAULT_GRAD_ACCUM)
    parser.add_argument("--lora-r", type=int, default=None, help="adapter rank (trainer default when omitted)")
    parser.add_argument("--lora-alpha", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        config = config_from_env(args)
    except KeyError as e:
        return _fail(f"missing required environment variable {e.args[0]}", 1)
    except ValueError as e:
        return _fail(str(e), 1)

    try:
        examples = load_training_file(config.train_file)
    except SchemaError as e:
        return _fail(f"invalid training file: {e}", 1)

    print(f"validated {len(examples)} training examples from {config.train_file}")

    if args.dry_run:
        print("dry-run-ok")
        return 0

    config.out_dir.mkdir(parents=True, exist_ok=True)

    if args.stub:
        print(f"stub training {config.base_model} for {config.epochs} epochs")
        identifier = run_stub(config, examples)
        print(identifier)
        return 0

    missing = missing_dependencies()
    if missing:
        return _fail(
            f"training dependencies not installed: {', '.join(missing)} "
            "(pip install 'trainer-shim[train]')",
            1,
        )
    print(
        f"training {config.base_model} for {config.epochs} epochs "
        f"(lr={config.learning_rate}, grad_accum={config.grad_accum_steps})"
    )
    try:
        identifier = run_lora(config, examples)
    except TrainerError as e:
        return _fail(str(e), 3)
    print(identifier)
    return 0


if __name__ == "__main__":
    sys.exit(main())
