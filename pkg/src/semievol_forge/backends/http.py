"""OpenAI-compatible HTTP backend.

Speaks POST /v1/chat/completions (with the ``logprobs`` request field),
POST /v1/embeddings, and POST/GET /v1/fine_tuning/jobs. Bearer-token auth
comes from an environment variable. Transport failures are retried with
exponential backoff; provider error payloads are surfaced as-is and never
retried; fine-tune submission is never retried at all because it is not
idempotent.
"""
from __future__ import annotations

import os
import time
from dataclasses import replace
from pathlib import Path

import requests

from ..errors import CapabilityError, ProviderError, TransportError
from .types import (
    ChatRequest,
    ChatResponse,
    EmbeddingRequest,
    FineTuneJob,
    ModelRef,
    RetryPolicy,
    validate_chat_payload,
    validate_score_args,
)

_TRANSPORT_EXCEPTIONS = (requests.ConnectionError, requests.Timeout)


class HttpBackend:
    """Client for one OpenAI-compatible endpoint."""

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "OPENAI_API_KEY",
        embed_model: str = "text-embedding-3-small",
        retry: RetryPolicy = RetryPolicy(),
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.embed_model = embed_model
        self.retry = retry
        self.timeout = timeout
        self.session = session or requests.Session()
        self.name = f"http:{self.base_url}"
        self._result_roles: dict[str, str] = {}

    def capabilities(self) -> frozenset[str]:
        return frozenset({"chat", "embed", "finetune"})

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _request(self, method: str, path: str, payload: dict | None = None,
                 retryable: bool = True) -> dict:
        url = f"{self.base_url}{path}"
        delays = self.retry.delays() if retryable else []
        attempts = self.retry.attempts if retryable else 1
        last_exc: Exception | None = None
        for attempt in range(attempts):
            try:
                resp = self.session.request(
                    method, url, json=payload, headers=self._headers(), timeout=self.timeout
                )
            except _TRANSPORT_EXCEPTIONS as e:
                last_exc = e
                if attempt < len(delays):
                    time.sleep(delays[attempt])
                continue
            if resp.status_code >= 400:
                try:
                    detail = resp.json().get("error", resp.text)
                except ValueError:
                    detail = resp.text
                raise ProviderError(f"{method} {path} -> {resp.status_code}: {detail}")
            try:
                return resp.json()
            except ValueError as e:
                raise ProviderError(f"{method} {path}: non-JSON response body") from e
        raise TransportError(
            f"{method} {url} failed after {attempts} attempts: {last_exc}"
        ) from last_exc

    def chat(self, req: ChatRequest) -> ChatResponse:
        body = req.to_obj()
        data = self._request("POST", "/v1/chat/completions", body)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
            finish = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as e:
            raise ProviderError(f"malformed chat completion payload: {data!r}") from e
        token_logprobs = None
        if req.want_logprobs:
            content = (choice.get("logprobs") or {}).get("content")
            if content is None:
                raise ProviderError("provider returned no logprobs despite request")
            token_logprobs = tuple(
                (item["token"], float(item["logprob"])) for item in content
            )
        return ChatResponse(text=text, token_logprobs=token_logprobs, finish_reason=finish)

    def embed(self, req: EmbeddingRequest) -> list[list[float]]:
        body = {"model": req.model or self.embed_model, "input": list(req.texts)}
        data = self._request("POST", "/v1/embeddings", body)
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            vectors = [[float(x) for x in row["embedding"]] for row in rows]
        except (KeyError, TypeError) as e:
            raise ProviderError(f"malformed embeddings payload: {data!r}") from e
        if len(vectors) != len(req.texts):
            raise ProviderError(
                f"embedding count mismatch: sent {len(req.texts)}, got {len(vectors)}"
            )
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise ProviderError(f"inconsistent embedding dimensions from provider: {sorted(dims)}")
        return vectors

    def score_completion(self, model: ModelRef, prompt: str, completion: str) -> list[float]:
        validate_score_args(prompt, completion)
        raise CapabilityError(
            "this endpoint has no echo-scoring surface; "
            "use generation-time logprobs as the confidence source"
        )

    def start_finetune(
        self, base: ModelRef, training_file: str | Path, epochs: int, result_role: str = "warm"
    ) -> FineTuneJob:
        validate_chat_payload(training_file)
        body = {
            "model": base.name,
            "training_file": str(training_file),
            "hyperparameters": {"n_epochs": epochs},
        }
        data = self._request("POST", "/v1/fine_tuning/jobs", body, retryable=False)
        job_id = data.get("id")
        if not job_id:
            raise ProviderError(f"fine-tune submission returned no job id: {data!r}")
        job = FineTuneJob(
            id=str(job_id),
            base=base,
            training_file=str(training_file),
            epochs=epochs,
            status="queued",
        )
        self._result_roles[job.id] = result_role
        return job

    def poll_finetune(self, job: FineTuneJob) -> FineTuneJob:
        data = self._request("GET", f"/v1/fine_tuning/jobs/{job.id}")
        status = data.get("status", "running")
        if status in ("validating_files", "queued"):
            return job
        if status == "running":
            return replace(job, status="running")
        if status == "succeeded":
            model_name = data.get("fine_tuned_model")
            if not model_name:
                raise ProviderError(f"succeeded job {job.id} has no fine_tuned_model")
            role = self._result_roles.get(job.id, "warm")
            result = ModelRef(name=model_name, role=role, backend=self.name, job_id=job.id)
            return FineTuneJob(
                id=job.id, base=job.base, training_file=job.training_file,
                epochs=job.epochs, status="succeeded", result=result,
            )
        if status in ("failed", "cancelled"):
            return FineTuneJob(
                id=job.id, base=job.base, training_file=job.training_file,
                epochs=job.epochs, status="failed",
                error=str(data.get("error", f"provider status {status}")),
            )
        raise ProviderError(f"unknown fine-tune status {status!r} for job {job.id}")


def wait_for_job(backend, job: FineTuneJob, poll_interval: float = 1.0,
                 timeout: float = 86400.0) -> FineTuneJob:
    """Poll one job until it leaves the queued/running states."""
    deadline = time.monotonic() + timeout
    while job.status in ("queued", "running"):
        if time.monotonic() > deadline:
            raise TransportError(f"fine-tune job {job.id} did not finish within {timeout}s")
        time.sleep(poll_interval)
        job = backend.poll_finetune(job)
    if job.status == "failed":
        raise ProviderError(f"fine-tune job {job.id} failed: {job.error}")
    return job
