from .command import CommandFineTuner
from .http import HttpBackend, wait_for_job
from .journal import JournaledBackend, ReplayMismatch, RequestJournal, replay
from .types import (
    Backend,
    ChatRequest,
    ChatResponse,
    EmbeddingRequest,
    FineTuneJob,
    ModelRef,
    ModelRegistry,
    RetryPolicy,
    request_fingerprint,
    validate_chat_payload,
)

__all__ = [
    "Backend",
    "ChatRequest",
    "ChatResponse",
    "CommandFineTuner",
    "EmbeddingRequest",
    "FineTuneJob",
    "HttpBackend",
    "JournaledBackend",
    "ModelRef",
    "ModelRegistry",
    "ReplayMismatch",
    "RequestJournal",
    "RetryPolicy",
    "replay",
    "request_fingerprint",
    "validate_chat_payload",
    "wait_for_job",
]
