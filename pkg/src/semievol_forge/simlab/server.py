"""Mount a simulated backend behind the OpenAI-compatible HTTP surface.

Used for wire-layer integration tests and for driving the orchestrator in
http mode without any real provider. Fine-tune jobs report ``queued`` on
submission and ``running`` on the first poll before turning terminal, so
client polling loops get exercised.
"""
from __future__ import annotations

import threading
from typing import Any

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..backends.types import ChatRequest, EmbeddingRequest, ModelRef
from ..errors import SemiEvolError
from .backend import SimulatedBackend
from .world import SyntheticWorld


def create_app(world: SyntheticWorld, state_path: str | None = None) -> FastAPI:
    backend = SimulatedBackend(world, state_path=state_path)
    app = FastAPI(title="semievol-simlab")
    jobs: dict[str, dict[str, Any]] = {}
    lock = threading.Lock()

    @app.exception_handler(SemiEvolError)
    async def _domain_error(_: Request, exc: SemiEvolError):
        return JSONResponse(
            status_code=400,
            content={"error": {"message": str(exc), "type": type(exc).__name__}},
        )

    @app.get("/")
    def root():
        return {"ok": True, "world": world.to_obj()}

    @app.post("/v1/chat/completions")
    def chat_completions(body: dict):
        req = ChatRequest(
            model=ModelRef(name=body["model"]),
            messages=tuple(body["messages"]),
            temperature=float(body.get("temperature", 0.0)),
            max_tokens=int(body.get("max_tokens", 512)),
            want_logprobs=bool(body.get("logprobs", False)),
        )
        resp = backend.chat(req)
        choice: dict[str, Any] = {
            "index": 0,
            "message": {"role": "assistant", "content": resp.text},
            "finish_reason": resp.finish_reason,
        }
        if resp.token_logprobs is not None:
            choice["logprobs"] = {
                "content": [{"token": t, "logprob": lp} for t, lp in resp.token_logprobs]
            }
        return {"object": "chat.completion", "model": body["model"], "choices": [choice]}

    @app.post("/v1/embeddings")
    def embeddings(body: dict):
        texts = body["input"]
        if isinstance(texts, str):
            texts = [texts]
        vectors = backend.embed(EmbeddingRequest(texts=tuple(texts), model=body.get("model")))
        return {
            "object": "list",
            "model": body.get("model", "sim-embed"),
            "data": [
                {"object": "embedding", "index": i, "embedding": v}
                for i, v in enumerate(vectors)
            ],
        }

    @app.post("/v1/fine_tuning/jobs")
    def create_finetune(body: dict):
        epochs = int(body.get("hyperparameters", {}).get("n_epochs", 2))
        job = backend.start_finetune(
            ModelRef(name=body["model"]),
            body["training_file"],
            epochs,
        )
        with lock:
            jobs[job.id] = {"job": job, "polls": 0}
        return {"id": job.id, "object": "fine_tuning.job", "model": body["model"], "status": "queued"}

    @app.get("/v1/fine_tuning/jobs/{job_id}")
    def get_finetune(job_id: str):
        with lock:
            entry = jobs.get(job_id)
            if entry is None:
                return JSONResponse(
                    status_code=404,
                    content={"error": {"message": f"no such job {job_id}", "type": "not_found"}},
                )
            entry["polls"] += 1
            polls = entry["polls"]
            job = entry["job"]
        if polls < 2:
            return {"id": job_id, "status": "running"}
        return {
            "id": job_id,
            "status": "succeeded",
            "fine_tuned_model": job.result.name,
        }

    return app


def serve(app: FastAPI, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="warning")
