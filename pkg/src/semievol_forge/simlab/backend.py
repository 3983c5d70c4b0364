"""Deterministic simulated backend.

Implements the full backend surface (chat with logprobs, embeddings,
echo-scoring, fine-tuning) against a :class:`SyntheticWorld`. Every draw is
derived by hashing the world seed together with the request content, so any
request replays to the identical response under arbitrary concurrency.

Behavioral model:

* A task prompt is answered correctly with probability ``accuracy(model,
  cluster) + icl_bonus * (same-cluster references in the system message)``.
  At temperature 0 the draw depends only on the task (a latent difficulty,
  shared across models and prompt paraphrases: greedy decoding is a fixed
  function of the task for this model family); at temperature > 0 the draw
  also hashes the model, prompt, and temperature, making collaborator
  samples independent.
* An arbitration prompt ("Multiple Answers:") is answered with the exact
  majority of the listed answers, ties to the lowest letter.
* Per-token logprobs come from the correctness-conditioned NLL bands of the
  oracle spec.
* Fine-tuning registers a new model whose per-cluster accuracy moves by
  ``finetune_gain`` times the signed training coverage of that cluster
  (wrong labels weigh ``-noise_penalty``), clamped to [0, 1]. The model
  name hashes the training file content, and the model table can be
  persisted to disk so resumed runs still resolve fine-tuned models.
"""
from __future__ import annotations

import hashlib
import json
import re
import threading
from pathlib import Path

from ..errors import SimulationError, ValidationError
from ..backends.types import (
    ChatRequest,
    ChatResponse,
    EmbeddingRequest,
    FineTuneJob,
    ModelRef,
    request_fingerprint,
    validate_chat_payload,
    validate_score_args,
)
from .world import SyntheticWorld, filler_words, find_task_ids

SIM_BASE_MODEL = "sim-base"
SIM_WARM_MODEL = "sim-warm"

_TOKEN_JITTER = 0.02
_MIN_NLL = 1e-4

_ANSWER_RE = re.compile(r"[Aa][Nn][Ss][Ww][Ee][Rr]:\s*([A-J])\b")
_NUMBERED_RE = re.compile(r"^\s*\d+\.\s*(\S.*?)\s*$", re.MULTILINE)


def _last_answer_letter(text: str) -> str | None:
    matches = _ANSWER_RE.findall(text or "")
    return matches[-1] if matches else None


class SimulatedBackend:
    """Pure-function backend over a synthetic world."""

    def __init__(self, world: SyntheticWorld, state_path: str | Path | None = None):
        self.world = world
        self.state_path = Path(state_path) if state_path else None
        self.name = f"simulated(seed={world.oracle.seed})"
        self._lock = threading.Lock()
        self._models: dict[str, dict] = {
            SIM_BASE_MODEL: {"default": world.oracle.accuracy_base, "per_cluster": {}},
            SIM_WARM_MODEL: {"default": world.oracle.accuracy_warm, "per_cluster": {}},
        }
        if self.state_path and self.state_path.exists():
            stored = json.loads(self.state_path.read_text(encoding="utf-8"))
            self._models.update(stored.get("models", {}))

    def capabilities(self) -> frozenset[str]:
        return frozenset({"chat", "embed", "score", "finetune"})

    # -- deterministic randomness ------------------------------------------

    def _u01(self, *keys: str) -> float:
        payload = "\x1f".join((str(self.world.oracle.seed),) + tuple(keys))
        digest = hashlib.blake2b(payload.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") / 2.0**64

    def _accuracy(self, model_name: str, cluster: int) -> float:
        table = self._models.get(model_name)
        if table is None:
            raise ValidationError(f"unknown simulated model {model_name!r}")
        return float(table["per_cluster"].get(str(cluster), table["default"]))

    def model_accuracy_table(self, model_name: str) -> dict:
        """Copy of the model's accuracy table, for test oracles."""
        table = self._models.get(model_name)
        if table is None:
            raise ValidationError(f"unknown simulated model {model_name!r}")
        return json.loads(json.dumps(table))

    def _token_logprobs(self, tokens: list[str], correct: bool, *keys: str) -> tuple:
        # one confidence level per response, so the response-mean NLL follows
        # the band distribution instead of concentrating at the band center
        mean, spread = self.world.oracle.nll_band(correct)
        level = mean + spread * (2.0 * self._u01("lvl", *keys) - 1.0)
        out = []
        for i, token in enumerate(tokens):
            jitter = _TOKEN_JITTER * (2.0 * self._u01("lp", *keys, str(i)) - 1.0)
            out.append((token, -max(level + jitter, _MIN_NLL)))
        return tuple(out)

    # -- chat ---------------------------------------------------------------

    def chat(self, req: ChatRequest) -> ChatResponse:
        user = next((m["content"] for m in reversed(req.messages) if m["role"] == "user"), None)
        if user is None:
            raise SimulationError("chat request has no user message")
        if "Multiple Answers:" in user:
            return self._chat_arbitration(req, user)
        return self._chat_task(req, user)

    def _chat_task(self, req: ChatRequest, user: str) -> ChatResponse:
        ids = find_task_ids(user)
        if not ids or not self.world.knows(ids[0]):
            raise SimulationError(f"unrecognized task prompt: {user[:80]!r}")
        tid = ids[0]
        cluster = self.world.cluster_of(tid)
        gold = self.world.gold_letter(tid)
        system = next((m["content"] for m in req.messages if m["role"] == "system"), "")
        same_cluster_refs = sum(
            1
            for ref_id in set(find_task_ids(system))
            if ref_id != tid and self.world.knows(ref_id) and self.world.cluster_of(ref_id) == cluster
        )
        p = self._accuracy(req.model.name, cluster) + self.world.oracle.icl_bonus * same_cluster_refs
        p = min(1.0, max(0.0, p))

        prompt_fp = request_fingerprint({"messages": [dict(m) for m in req.messages]})
        temp_key = repr(float(req.temperature))
        if req.temperature <= 0:
            # greedy decoding: a latent per-task difficulty shared across
            # models and prompt paraphrases
            u = self._u01("difficulty", tid)
        else:
            u = self._u01("sample", req.model.name, tid, prompt_fp, temp_key)
        correct = u < p

        if correct:
            letter = gold
        else:
            others = [c for c in self.world.option_letters() if c != gold]
            if req.temperature <= 0:
                pick = self._u01("wrongpick0", tid)
            else:
                # keyed on the model too: collaborators err independently
                pick = self._u01("wrongpick", req.model.name, tid, prompt_fp, temp_key)
            letter = others[min(int(pick * len(others)), len(others) - 1)]

        count = 2 + int(self._u01("fill", req.model.name, tid, prompt_fp) * 4)
        offset = int(self._u01("filloff", tid) * 12)
        words = filler_words(count, offset) + ["Answer:", letter]
        text = " ".join(words)
        logprobs = None
        if req.want_logprobs:
            logprobs = self._token_logprobs(
                words, correct, "gen", req.model.name, tid, prompt_fp, temp_key
            )
        return ChatResponse(text=text, token_logprobs=logprobs, finish_reason="stop")

    def _chat_arbitration(self, req: ChatRequest, user: str) -> ChatResponse:
        ids = find_task_ids(user)
        if not ids or not self.world.knows(ids[0]):
            raise SimulationError("arbitration prompt does not reference a known task")
        tid = ids[0]
        block = user.split("Multiple Answers:", 1)[1]
        block = block.split("Now, please", 1)[0]
        answers = _NUMBERED_RE.findall(block)
        if len(answers) < 2:
            raise SimulationError("arbitration prompt lists fewer than two answers")
        counts: dict[str, int] = {}
        for answer in answers:
            counts[answer] = counts.get(answer, 0) + 1
        winner = sorted(counts, key=lambda a: (-counts[a], a))[0]

        text = f"Answer: {winner}"
        logprobs = None
        if req.want_logprobs:
            correct = winner == self.world.gold_letter(tid)
            prompt_fp = request_fingerprint({"messages": [dict(m) for m in req.messages]})
            logprobs = self._token_logprobs(
                text.split(), correct, "justifygen", req.model.name, tid, prompt_fp
            )
        return ChatResponse(text=text, token_logprobs=logprobs, finish_reason="stop")

    # -- embeddings ----------------------------------------------------------

    def embed(self, req: EmbeddingRequest) -> list[list[float]]:
        return [self._embed_one(text) for text in req.texts]

    def _embed_one(self, text: str) -> list[float]:
        dim = self.world.embedding_dimension()
        ids = find_task_ids(text)
        if ids and self.world.knows(ids[0]):
            tid = ids[0]
            cluster = self.world.cluster_of(tid)
            noise = [self._u01("emb", tid, str(j)) for j in range(6)]
            norm = sum(x * x for x in noise) ** 0.5
            vector = [0.0] * dim
            vector[cluster] = 0.95**0.5
            for j, x in enumerate(noise):
                vector[self.world.clusters + j] = 0.05**0.5 * (x / norm)
            return vector
        raw = [self._u01("embtext", text, str(j)) + 0.1 for j in range(dim)]
        norm = sum(x * x for x in raw) ** 0.5
        return [x / norm for x in raw]

    # -- echo scoring ----------------------------------------------------------

    def score_completion(self, model: ModelRef, prompt: str, completion: str) -> list[float]:
        validate_score_args(prompt, completion)
        ids = find_task_ids(prompt)
        if not ids or not self.world.knows(ids[0]):
            raise SimulationError("scoring prompt does not reference a known task")
        tid = ids[0]
        letter = _last_answer_letter(completion)
        correct = letter == self.world.gold_letter(tid)
        completion_fp = request_fingerprint({"completion": completion})
        pairs = self._token_logprobs(
            completion.split(), correct, "score", model.name, tid, completion_fp
        )
        return [lp for _, lp in pairs]

    # -- fine-tuning -------------------------------------------------------------

    def start_finetune(
        self, base: ModelRef, training_file: str | Path, epochs: int, result_role: str = "warm"
    ) -> FineTuneJob:
        validate_chat_payload(training_file)
        content = Path(training_file).read_text(encoding="utf-8")
        correct_counts: dict[int, float] = {}
        wrong_counts: dict[int, float] = {}
        for lineno, raw in enumerate(content.splitlines(), start=1):
            if not raw.strip():
                continue
            messages = json.loads(raw)["messages"]
            user = next((m["content"] for m in messages if m["role"] == "user"), "")
            assistant = next(
                (m["content"] for m in reversed(messages) if m["role"] == "assistant"), ""
            )
            ids = find_task_ids(user)
            if not ids or not self.world.knows(ids[0]):
                raise SimulationError(f"training line {lineno} does not reference a known task")
            tid = ids[0]
            cluster = self.world.cluster_of(tid)
            letter = _last_answer_letter(assistant)
            if letter == self.world.gold_letter(tid):
                correct_counts[cluster] = correct_counts.get(cluster, 0.0) + 1.0
            else:
                wrong_counts[cluster] = wrong_counts.get(cluster, 0.0) + 1.0

        parent = self._models.get(base.name)
        if parent is None:
            raise ValidationError(f"unknown simulated model {base.name!r}")
        oracle = self.world.oracle
        per_cluster = dict(parent["per_cluster"])
        for cluster in set(correct_counts) | set(wrong_counts):
            signed = correct_counts.get(cluster, 0.0) - oracle.noise_penalty * wrong_counts.get(
                cluster, 0.0
            )
            coverage = max(-1.0, min(1.0, signed / oracle.saturation))
            previous = float(per_cluster.get(str(cluster), parent["default"]))
            per_cluster[str(cluster)] = min(
                1.0, max(0.0, previous + oracle.finetune_gain * coverage)
            )

        name = "sim-ft-" + request_fingerprint({"base": base.name, "content": content})[:10]
        with self._lock:
            self._models[name] = {"default": parent["default"], "per_cluster": per_cluster}
            self._persist()
        result = ModelRef(name=name, role=result_role, backend=self.name, job_id=name)
        return FineTuneJob(
            id=name,
            base=base,
            training_file=str(training_file),
            epochs=epochs,
            status="succeeded",
            result=result,
        )

    def poll_finetune(self, job: FineTuneJob) -> FineTuneJob:
        return job

    def _persist(self) -> None:
        if self.state_path is None:
            return
        self.state_path.parent.mkdir(parents=True, exist_ok=True)
        self.state_path.write_text(
            json.dumps({"models": self._models}, sort_keys=True), encoding="utf-8"
        )
