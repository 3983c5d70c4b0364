from __future__ import annotations

import hashlib
import math

import pytest

from semievol_forge.backends.types import ChatRequest, ChatResponse, FineTuneJob, ModelRef
from semievol_forge.data import Answer, Dataset, TaskRecord


class ScriptedBackend:
    """Hand-scriptable backend for unit tests.

    ``chat_script`` maps a request to response text (or a ChatResponse);
    ``score_probs`` gives the per-token probabilities used for echo-scoring.
    Every call is recorded for assertion.
    """

    name = "scripted"

    def __init__(
        self,
        chat_script=None,
        score_probs=None,
        embed_dim: int = 8,
        caps=("chat", "embed", "score", "finetune"),
        token_logprob: float = -0.5,
    ):
        self.chat_script = chat_script
        self.score_probs = score_probs
        self.embed_dim = embed_dim
        self.caps = frozenset(caps)
        self.token_logprob = token_logprob
        self.calls = {"chat": [], "embed": [], "score": [], "finetune": []}
        self._job_counter = 0

    def capabilities(self):
        return self.caps

    def chat(self, req: ChatRequest) -> ChatResponse:
        self.calls["chat"].append(req)
        out = self.chat_script(req) if self.chat_script else "Answer: A"
        if isinstance(out, ChatResponse):
            return out
        tokens = out.split()
        logprobs = None
        if req.want_logprobs:
            logprobs = tuple((t, self.token_logprob) for t in tokens)
        return ChatResponse(text=out, token_logprobs=logprobs)

    def embed(self, req):
        self.calls["embed"].append(req)
        vectors = []
        for text in req.texts:
            digest = hashlib.blake2b(text.encode(), digest_size=self.embed_dim).digest()
            vectors.append([b / 255.0 + 0.01 for b in digest])
        return vectors

    def embed_as_fn(self):
        """Adapter matching the retrieval module's Embedder callable."""
        from semievol_forge.backends.types import EmbeddingRequest

        return lambda texts: self.embed(EmbeddingRequest(texts=tuple(texts)))

    def score_completion(self, model: ModelRef, prompt: str, completion: str) -> list[float]:
        self.calls["score"].append((model, prompt, completion))
        tokens = completion.split()
        if callable(self.score_probs):
            probs = self.score_probs(completion)
        elif self.score_probs is not None:
            probs = self.score_probs
        else:
            probs = [math.exp(self.token_logprob)] * len(tokens)
        return [math.log(p) for p in probs[: len(tokens)]] + [
            self.token_logprob for _ in range(max(0, len(tokens) - len(probs)))
        ]

    def start_finetune(self, base, training_file, epochs, result_role="warm"):
        self.calls["finetune"].append((base, str(training_file), epochs, result_role))
        self._job_counter += 1
        name = f"stub-ft-{self._job_counter}"
        return FineTuneJob(
            id=name,
            base=base,
            training_file=str(training_file),
            epochs=epochs,
            status="succeeded",
            result=ModelRef(name=name, role=result_role, backend=self.name),
        )

    def poll_finetune(self, job):
        return job


def make_mc_record(
    record_id: str = "q-001",
    question: str = "What color is the sky on a clear day?",
    gold: str | None = "B",
    category: str = "physics",
) -> TaskRecord:
    return TaskRecord(
        id=record_id,
        question=question,
        options=(
            ("A", "red"),
            ("B", "blue"),
            ("C", "green"),
            ("D", "yellow"),
        ),
        gold=Answer(kind="choice", choice=gold) if gold else None,
        meta={"category": category},
    )


def make_numeric_record(record_id: str = "n-001") -> TaskRecord:
    return TaskRecord(
        id=record_id,
        question="What is the net revenue growth rate?",
        gold=Answer(kind="numeric", value=3.14),
    )


@pytest.fixture
def mc_record() -> TaskRecord:
    return make_mc_record()


@pytest.fixture
def numeric_record() -> TaskRecord:
    return make_numeric_record()


@pytest.fixture
def small_dataset() -> Dataset:
    records = tuple(
        make_mc_record(record_id=f"q-{i:03d}", question=f"Question number {i}?", gold="ABCD"[i % 4])
        for i in range(12)
    )
    return Dataset(records, provenance="fixture")
