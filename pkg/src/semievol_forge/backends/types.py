"""Wire types and contracts for chat, embedding, and fine-tuning backends.

A backend exposes some subset of the capabilities ``{"chat", "embed",
"score", "finetune"}``. Echo-scoring (per-token logprobs of a fixed
completion) is a separate capability because most hosted chat surfaces only
return generation-time logprobs.
"""
from __future__ import annotations

import json
import hashlib
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

from ..errors import ParseError, ValidationError

MODEL_ROLES = ("base", "warm", "evolved")
JOB_STATUSES = ("queued", "running", "succeeded", "failed")

CHAT_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ModelRef:
    """A named model plus its role in the evolution loop.

    Warm and evolved refs record the fine-tune job that produced them.
    """

    name: str
    role: str = "base"
    backend: str = ""
    job_id: str | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("model name must be non-empty")
        if self.role not in MODEL_ROLES:
            raise ValidationError(f"unknown model role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model: ModelRef
    messages: tuple[dict[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 512
    want_logprobs: bool = False

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValidationError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        for m in self.messages:
            if m.get("role") not in CHAT_ROLES or not isinstance(m.get("content"), str):
                raise ValidationError(f"malformed chat message: {m!r}")

    def to_obj(self) -> dict:
        return {
            "model": self.model.name,
            "messages": [dict(m) for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "logprobs": self.want_logprobs,
        }


@dataclass(frozen=True)
class ChatResponse:
    text: str
    token_logprobs: tuple[tuple[str, float], ...] | None = None
    finish_reason: str = "stop"

    def __post_init__(self) -> None:
        if self.token_logprobs is not None:
            for token, lp in self.token_logprobs:
                if lp > 0:
                    raise ValidationError(f"token logprob must be <= 0, got {lp} for {token!r}")

    def logprobs(self) -> list[float]:
        if self.token_logprobs is None:
            return []
        return [lp for _, lp in self.token_logprobs]


@dataclass(frozen=True)
class EmbeddingRequest:
    texts: tuple[str, ...]
    model: str | None = None

    def __post_init__(self) -> None:
        if not self.texts:
            raise ValidationError("embedding request needs at least one text")


@dataclass(frozen=True)
class FineTuneJob:
    id: str
    base: ModelRef
    training_file: str
    epochs: int
    status: str = "queued"
    result: ModelRef | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.status not in JOB_STATUSES:
            raise ValidationError(f"unknown job status {self.status!r}")
        if (self.status == "succeeded") != (self.result is not None):
            raise ValidationError("job result must be populated exactly when status is succeeded")


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded retries with exponential backoff, for transport errors only."""

    attempts: int = 3
    base_delay: float = 1.0
    multiplier: float = 2.0

    def delays(self) -> list[float]:
        return [self.base_delay * self.multiplier**i for i in range(self.attempts - 1)]


@runtime_checkable
class Backend(Protocol):
    name: str

    def capabilities(self) -> frozenset[str]: ...

    def chat(self, req: ChatRequest) -> ChatResponse: ...

    def embed(self, req: EmbeddingRequest) -> list[list[float]]: ...

    def score_completion(self, model: ModelRef, prompt: str, completion: str) -> list[float]: ...

    def start_finetune(
        self, base: ModelRef, training_file: str | Path, epochs: int, result_role: str = "warm"
    ) -> FineTuneJob: ...

    def poll_finetune(self, job: FineTuneJob) -> FineTuneJob: ...


class ModelRegistry:
    """Tracks the model refs a run knows about, keyed by name."""

    def __init__(self) -> None:
        self._models: dict[str, ModelRef] = {}

    def register(self, ref: ModelRef) -> ModelRef:
        self._models[ref.name] = ref
        return ref

    def resolve(self, name: str) -> ModelRef:
        if name not in self._models:
            raise ValidationError(f"unknown model {name!r}")
        return self._models[name]

    def by_role(self, role: str) -> ModelRef | None:
        for ref in self._models.values():
            if ref.role == role:
                return ref
        return None


def request_fingerprint(obj: dict) -> str:
    """Stable short hash of a request body, for journaling and replay."""
    canonical = json.dumps(obj, sort_keys=True, ensure_ascii=False)
    return hashlib.blake2b(canonical.encode("utf-8"), digest_size=10).hexdigest()


def validate_score_args(prompt: str, completion: str) -> None:
    if not completion:
        raise ValidationError("completion to score must be non-empty")
    if not prompt:
        raise ValidationError("scoring prompt must be non-empty")


def validate_chat_payload(path: str | Path) -> int:
    """Validate a chat-format fine-tune payload file; returns the line count.

    Each line must be ``{"messages": [{"role": ..., "content": ...}, ...]}``
    with roles from {system, user, assistant} and a final assistant message.
    Raises :class:`ParseError` naming the offending line.
    """
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"training file does not exist: {p}")
    count = 0
    with p.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"malformed JSON ({e.msg})", path=str(p), line=lineno) from e
            if not isinstance(obj, dict) or "messages" not in obj:
                raise ParseError("record is missing 'messages'", path=str(p), line=lineno)
            messages = obj["messages"]
            if not isinstance(messages, list) or not messages:
                raise ParseError("'messages' must be a non-empty list", path=str(p), line=lineno)
            for m in messages:
                if (
                    not isinstance(m, dict)
                    or m.get("role") not in CHAT_ROLES
                    or not isinstance(m.get("content"), str)
                ):
                    raise ParseError(f"malformed message {m!r}", path=str(p), line=lineno)
            if messages[-1]["role"] != "assistant":
                raise ParseError(
                    "last message must be the assistant answer", path=str(p), line=lineno
                )
            count += 1
    if count == 0:
        raise ValidationError(f"training file {p} has no records")
    return count


def now_ms() -> float:
    return time.time() * 1000.0
