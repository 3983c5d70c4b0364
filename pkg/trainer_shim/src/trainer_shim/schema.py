"""Validation of the chat-format training payload.

One JSON object per line: ``{"messages": [{"role": ..., "content": ...},
...]}`` with roles from {system, user, assistant} and a final assistant
message carrying the target answer. This mirrors the payload the
orchestrator emits; the file format is the contract between the two sides.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

ROLES = ("system", "user", "assistant")


class SchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class TrainingExample:
    messages: tuple[dict[str, str], ...]

    @property
    def prompt_messages(self) -> tuple[dict[str, str], ...]:
        return self.messages[:-1]

    @property
    def target(self) -> str:
        return self.messages[-1]["content"]


def load_training_file(path: str | Path) -> list[TrainingExample]:
    """Parse and validate the payload; raises SchemaError naming the line."""
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"training file does not exist: {p}")
    examples: list[TrainingExample] = []
    with p.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise SchemaError(f"malformed JSON ({e.msg})", line=lineno) from e
            if not isinstance(obj, dict) or "messages" not in obj:
                raise SchemaError("record is missing 'messages'", line=lineno)
            messages = obj["messages"]
            if not isinstance(messages, list) or not messages:
                raise SchemaError("'messages' must be a non-empty list", line=lineno)
            for m in messages:
                if (
                    not isinstance(m, dict)
                    or m.get("role") not in ROLES
                    or not isinstance(m.get("content"), str)
                ):
                    raise SchemaError(f"malformed message {m!r}", line=lineno)
            if messages[-1]["role"] != "assistant":
                raise SchemaError("last message must be the assistant answer", line=lineno)
            examples.append(TrainingExample(messages=tuple(messages)))
    if not examples:
        raise SchemaError(f"training file {p} has no records")
    return examples
