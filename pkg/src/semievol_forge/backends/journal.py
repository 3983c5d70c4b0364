"""Append-only request journal and the instrumented backend wrapper.

Every chat, embed, and score call through :class:`JournaledBackend` is
recorded as one JSONL entry holding the full request body, a request
fingerprint, a response fingerprint, and latency. Replaying a journal
against a deterministic backend re-issues each request and checks that the
response fingerprints still match. Fine-tune submissions are journaled too
(with the task ids they train on, when provided) but are never retried and
never replayed.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from ..errors import ValidationError
from .types import (
    Backend,
    ChatRequest,
    ChatResponse,
    EmbeddingRequest,
    FineTuneJob,
    ModelRef,
    request_fingerprint,
)


def _response_fingerprint(kind: str, payload: object) -> str:
    return request_fingerprint({"kind": kind, "payload": payload})


def chat_response_obj(resp: ChatResponse) -> dict:
    return {
        "text": resp.text,
        "token_logprobs": [[t, lp] for t, lp in resp.token_logprobs]
        if resp.token_logprobs is not None
        else None,
        "finish_reason": resp.finish_reason,
    }


class RequestJournal:
    """Thread-safe append-only JSONL journal."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, entry: dict) -> None:
        line = json.dumps(entry, ensure_ascii=False, sort_keys=True)
        with self._lock:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(line)
                f.write("\n")

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        with self.path.open("r", encoding="utf-8") as f:
            for raw in f:
                if raw.strip():
                    out.append(json.loads(raw))
        return out


@dataclass
class ReplayMismatch:
    index: int
    kind: str
    expected: str
    got: str


def replay(journal: RequestJournal, backend: Backend) -> list[ReplayMismatch]:
    """Re-issue journaled chat/embed/score requests; report fingerprint drift."""
    mismatches: list[ReplayMismatch] = []
    for i, entry in enumerate(journal.entries()):
        kind = entry.get("kind")
        req = entry.get("request", {})
        if kind == "chat":
            resp = backend.chat(
                ChatRequest(
                    model=ModelRef(name=req["model"], role=req.get("model_role", "base")),
                    messages=tuple(req["messages"]),
                    temperature=req["temperature"],
                    max_tokens=req["max_tokens"],
                    want_logprobs=req["logprobs"],
                )
            )
            got = _response_fingerprint("chat", chat_response_obj(resp))
        elif kind == "embed":
            vectors = backend.embed(EmbeddingRequest(texts=tuple(req["texts"]), model=req.get("embed_model")))
            got = _response_fingerprint("embed", vectors)
        elif kind == "score":
            got = _response_fingerprint(
                "score",
                backend.score_completion(
                    ModelRef(name=req["model"], role=req.get("model_role", "base")),
                    req["prompt"],
                    req["completion"],
                ),
            )
        else:
            continue
        expected = entry.get("response_fingerprint", "")
        if got != expected:
            mismatches.append(ReplayMismatch(index=i, kind=kind, expected=expected, got=got))
    return mismatches


class JournaledBackend:
    """Wraps a backend with journaling and a global in-flight request bound."""

    def __init__(self, inner: Backend, journal: RequestJournal, max_in_flight: int = 8):
        if max_in_flight < 1:
            raise ValidationError("max_in_flight must be >= 1")
        self.inner = inner
        self.journal = journal
        self.name = f"journaled({inner.name})"
        self._gate = threading.BoundedSemaphore(max_in_flight)

    def capabilities(self) -> frozenset[str]:
        return self.inner.capabilities()

    def _record(self, kind: str, request_obj: dict, started: float, *, ok: bool,
                response_fp: str = "", error: str = "", extra: dict | None = None) -> None:
        entry = {
            "ts": time.time(),
            "kind": kind,
            "model": request_obj.get("model", ""),
            "request": request_obj,
            "request_fingerprint": request_fingerprint(request_obj),
            "response_fingerprint": response_fp,
            "latency_ms": round((time.perf_counter() - started) * 1000.0, 3),
            "ok": ok,
        }
        if error:
            entry["error"] = error
        if extra:
            entry.update(extra)
        self.journal.append(entry)

    def chat(self, req: ChatRequest) -> ChatResponse:
        obj = req.to_obj()
        obj["model_role"] = req.model.role
        started = time.perf_counter()
        with self._gate:
            try:
                resp = self.inner.chat(req)
            except Exception as e:
                self._record("chat", obj, started, ok=False, error=str(e))
                raise
        self._record(
            "chat", obj, started, ok=True,
            response_fp=_response_fingerprint("chat", chat_response_obj(resp)),
        )
        return resp

    def embed(self, req: EmbeddingRequest) -> list[list[float]]:
        obj = {"texts": list(req.texts), "embed_model": req.model}
        started = time.perf_counter()
        with self._gate:
            try:
                vectors = self.inner.embed(req)
            except Exception as e:
                self._record("embed", obj, started, ok=False, error=str(e))
                raise
        self._record("embed", obj, started, ok=True,
                     response_fp=_response_fingerprint("embed", vectors))
        return vectors

    def score_completion(self, model: ModelRef, prompt: str, completion: str) -> list[float]:
        obj = {"model": model.name, "model_role": model.role, "prompt": prompt,
               "completion": completion}
        started = time.perf_counter()
        with self._gate:
            try:
                logprobs = self.inner.score_completion(model, prompt, completion)
            except Exception as e:
                self._record("score", obj, started, ok=False, error=str(e))
                raise
        self._record("score", obj, started, ok=True,
                     response_fp=_response_fingerprint("score", logprobs))
        return logprobs

    def start_finetune(
        self,
        base: ModelRef,
        training_file: str | Path,
        epochs: int,
        result_role: str = "warm",
        task_ids: list[str] | None = None,
    ) -> FineTuneJob:
        obj = {
            "model": base.name,
            "training_file": str(training_file),
            "epochs": epochs,
            "result_role": result_role,
        }
        started = time.perf_counter()
        try:
            job = self.inner.start_finetune(base, training_file, epochs, result_role=result_role)
        except Exception as e:
            self._record("finetune", obj, started, ok=False, error=str(e),
                         extra={"task_ids": task_ids or []})
            raise
        self._record(
            "finetune", obj, started, ok=True,
            response_fp=request_fingerprint({"job": job.id, "status": job.status}),
            extra={"task_ids": task_ids or [], "job_id": job.id},
        )
        return job

    def poll_finetune(self, job: FineTuneJob) -> FineTuneJob:
        return self.inner.poll_finetune(job)
