"""Collaborative inference: n differently-configured passes per unlabeled
task, arbitrated into one pseudo-response.

Each collaborator is a (model choice, reference count) cell from the 2x4
grid {base, warm} x {0, 1, 2, 3 references}, run at temperature 1. The
sampled set always covers both propagation channels: at least one
collaborator uses the warm model and at least one sees references. When the
collaborators disagree, the warm model arbitrates at temperature 0; if its
verdict cannot be parsed, the modal answer wins with ties broken toward the
lowest letter or smallest value. Unanimous answers skip the arbitration
call entirely (flagged in meta for audit).

Tasks are processed concurrently but committed in ascending task id order,
so output files are deterministic.
"""
from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .backends.types import Backend, ChatRequest, EmbeddingRequest, ModelRef
from .concurrency import parallel_map
from .data import Answer, Dataset, TaskRecord
from .errors import CapabilityError, ProviderError, TransportError, ValidationError
from .evaluation import expected_kind, extract_answer
from .prompting import TemplateSet, render_self_justify, render_task
from .retrieval import EmbeddingIndex, knn

CONFIG_GRID: tuple[tuple[bool, int], ...] = tuple(
    (use_warm, ref_count) for use_warm in (False, True) for ref_count in (0, 1, 2, 3)
)


@dataclass(frozen=True)
class InferenceConfig:
    """One collaborator's settings."""

    index: int
    use_warm: bool
    ref_count: int
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValidationError("collaborator index starts at 1")
        if not 0 <= self.ref_count <= 3:
            raise ValidationError(f"ref_count must be in 0..3, got {self.ref_count}")

    def to_obj(self) -> dict:
        return {
            "index": self.index,
            "use_warm": self.use_warm,
            "ref_count": self.ref_count,
            "temperature": self.temperature,
        }


@dataclass
class CollaboratorResult:
    config: InferenceConfig
    text: str | None
    answer: Answer | None
    failed: bool = False
    # generation logprobs are kept in memory for the single-answer fallback
    # but are not part of the audit serialization
    logprobs: tuple[float, ...] | None = None

    def to_obj(self) -> dict:
        return {
            "config": self.config.to_obj(),
            "text": self.text,
            "answer": self.answer.to_obj() if self.answer else None,
            "failed": self.failed,
        }


@dataclass
class PseudoResponse:
    """Arbitrated answer for one unlabeled task, with full audit trail."""

    task_id: str
    per_collaborator: list[CollaboratorResult]
    justified_text: str | None = None
    justified_answer: Answer | None = None
    justified_logprobs: tuple[float, ...] | None = None
    entropy: float | None = None
    token_count: int | None = None
    entropy_source: str | None = None
    undecidable: bool = False
    meta: dict[str, str] = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "task_id": self.task_id,
            "collaborators": [c.to_obj() for c in self.per_collaborator],
            "justified_text": self.justified_text,
            "justified_answer": self.justified_answer.to_obj() if self.justified_answer else None,
            "justified_logprobs": list(self.justified_logprobs)
            if self.justified_logprobs is not None
            else None,
            "entropy": self.entropy,
            "token_count": self.token_count,
            "entropy_source": self.entropy_source,
            "undecidable": self.undecidable,
            "meta": self.meta,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "PseudoResponse":
        collaborators = [
            CollaboratorResult(
                config=InferenceConfig(**c["config"]),
                text=c["text"],
                answer=Answer.from_obj(c["answer"]) if c["answer"] else None,
                failed=c["failed"],
            )
            for c in obj.get("collaborators", [])
        ]
        justified = obj.get("justified_answer")
        logprobs = obj.get("justified_logprobs")
        return cls(
            task_id=obj["task_id"],
            per_collaborator=collaborators,
            justified_text=obj.get("justified_text"),
            justified_answer=Answer.from_obj(justified) if justified else None,
            justified_logprobs=tuple(logprobs) if logprobs is not None else None,
            entropy=obj.get("entropy"),
            token_count=obj.get("token_count"),
            entropy_source=obj.get("entropy_source"),
            undecidable=obj.get("undecidable", False),
            meta=obj.get("meta", {}),
        )


def sample_configs(n: int, seed: int, temperature: float = 1.0) -> list[InferenceConfig]:
    """Draw n collaborator configurations from the 2x4 grid, deterministically.

    Without replacement up to the grid size, with replacement beyond it. The
    sample always contains a warm-model collaborator and a referenced
    collaborator so both propagation channels are exercised.
    """
    if n < 2:
        raise ValidationError("collaborative inference needs n >= 2 configurations")
    rng = random.Random(seed)
    if n <= len(CONFIG_GRID):
        for _ in range(1000):
            cells = rng.sample(CONFIG_GRID, n)
            if any(w for w, _ in cells) and any(r > 0 for _, r in cells):
                break
        else:  # pragma: no cover - the coverage draw converges almost surely
            raise ValidationError("could not sample a covering configuration set")
    else:
        cells = list(CONFIG_GRID)
        rng.shuffle(cells)
        cells += [rng.choice(CONFIG_GRID) for _ in range(n - len(CONFIG_GRID))]
    return [
        InferenceConfig(index=i, use_warm=w, ref_count=r, temperature=temperature)
        for i, (w, r) in enumerate(cells, start=1)
    ]


def single_config(seed: int, temperature: float = 1.0) -> list[InferenceConfig]:
    """Degenerate one-collaborator setup for the no-collaboration ablation.

    Draws a single grid cell with the same sampler semantics; the coverage
    constraint only binds from two collaborators up.
    """
    use_warm, ref_count = random.Random(seed).choice(CONFIG_GRID)
    return [
        InferenceConfig(index=1, use_warm=use_warm, ref_count=ref_count, temperature=temperature)
    ]


def infer_all(
    record: TaskRecord,
    configs: list[InferenceConfig],
    index: EmbeddingIndex | None,
    models: dict[str, ModelRef],
    backend: Backend,
    k: int = 3,
    templates: TemplateSet | None = None,
) -> list[CollaboratorResult]:
    """Run every collaborator on one task; failed slots are kept, not raised.

    All collaborators share one retrieval: each sees a prefix of the same
    top-k reference list.
    """
    if any(c.use_warm for c in configs) and "warm" not in models:
        raise ValidationError("a collaborator wants the warm model but none is available")
    max_refs = max((c.ref_count for c in configs), default=0)
    refs: list[str] = []
    if max_refs > 0:
        if index is None:
            raise ValidationError("reference-using collaborators need an embedding index")
        query = backend.embed(EmbeddingRequest(texts=(record.question,)))[0]
        refs = [index.example_for(tid) for tid, _ in knn(index, query, max(k, max_refs))]

    results: list[CollaboratorResult] = []
    for config in sorted(configs, key=lambda c: c.index):
        model = models["warm"] if config.use_warm else models["base"]
        messages = render_task(record, refs[: config.ref_count], templates)
        try:
            resp = backend.chat(
                ChatRequest(
                    model=model,
                    messages=tuple(messages),
                    temperature=config.temperature,
                    want_logprobs=True,
                )
            )
        except (TransportError, ProviderError, CapabilityError):
            results.append(CollaboratorResult(config=config, text=None, answer=None, failed=True))
            continue
        answer = extract_answer(resp.text, expected_kind(record))
        if answer is not None and record.options:
            letters = {letter for letter, _ in record.options}
            if answer.choice not in letters:
                answer = None
        results.append(
            CollaboratorResult(
                config=config,
                text=resp.text,
                answer=answer,
                logprobs=tuple(resp.logprobs()) if resp.token_logprobs else None,
            )
        )
    return results


def _modal_answer(answers: list[Answer]) -> Answer:
    """Most frequent answer; ties break to the lowest letter / smallest value."""
    counts = Counter(a.canonical() for a in answers)
    by_key = {a.canonical(): a for a in answers}

    def tie_key(canonical: str) -> tuple:
        answer = by_key[canonical]
        if answer.kind == "numeric":
            return (answer.value,)
        return (canonical,)

    winner = sorted(counts, key=lambda c: (-counts[c],) + tie_key(c))[0]
    return by_key[winner]


def self_justify(
    record: TaskRecord,
    answers: list[tuple[int, Answer]],
    justifier: ModelRef,
    backend: Backend,
    templates: TemplateSet | None = None,
    allow_short_circuit: bool = True,
) -> tuple[str, Answer, tuple[float, ...] | None, dict[str, str]]:
    """Arbitrate disagreeing collaborator answers into one final answer.

    Returns (text, answer, generation logprobs, meta). Unanimous answers
    short-circuit without a model call; unparseable arbitration falls back
    to the modal answer. Backends without echo-scoring must disable the
    short-circuit so that a generation-logprob confidence source exists for
    every pseudo-response.
    """
    if len(answers) < 2:
        raise ValidationError("self-justify needs at least 2 extracted answers")
    if justifier.role != "warm":
        raise ValidationError("the arbitration model must be the warm model")

    unique = {a.canonical() for _, a in answers}
    if len(unique) == 1 and allow_short_circuit:
        answer = answers[0][1]
        return f"Answer: {answer.canonical()}", answer, None, {"justify": "unanimous"}

    messages = render_self_justify(record, [(i, a.canonical()) for i, a in answers], templates)
    resp = backend.chat(
        ChatRequest(
            model=justifier,
            messages=tuple(messages),
            temperature=0.0,
            want_logprobs=True,
        )
    )
    logprobs = tuple(resp.logprobs()) if resp.token_logprobs else None
    verdict = extract_answer(resp.text, expected_kind(record))
    if verdict is not None and record.options:
        letters = {letter for letter, _ in record.options}
        if verdict.choice not in letters:
            verdict = None
    if verdict is not None:
        return resp.text, verdict, logprobs, {"justify": "model"}

    fallback = _modal_answer([a for _, a in answers])
    return (
        f"Answer: {fallback.canonical()}",
        fallback,
        None,
        {"justify": "fallback_modal"},
    )


def collect_responses(
    tasks: Dataset,
    configs: list[InferenceConfig],
    index: EmbeddingIndex | None,
    models: dict[str, ModelRef],
    backend: Backend,
    k: int = 3,
    templates: TemplateSet | None = None,
    max_workers: int = 8,
) -> list[PseudoResponse]:
    """Collaborator passes over a whole unlabeled pool, unarbitrated.

    A task becomes undecidable when at least ceil(n/2) collaborators fail.
    Results come back in ascending task id order regardless of completion
    order.
    """
    n = len(configs)
    quorum = math.ceil(n / 2)

    def run_one(record: TaskRecord) -> PseudoResponse:
        results = infer_all(record, configs, index, models, backend, k=k, templates=templates)
        pseudo = PseudoResponse(task_id=record.id, per_collaborator=results)
        failures = sum(1 for r in results if r.failed)
        if failures >= quorum:
            pseudo.undecidable = True
            pseudo.meta["reason"] = f"{failures}/{n} collaborators failed"
        return pseudo

    ordered_tasks = sorted(tasks.records, key=lambda r: r.id)
    return parallel_map(run_one, ordered_tasks, max_workers=max_workers)


def arbitrate(
    pseudos: list[PseudoResponse],
    tasks: Dataset,
    models: dict[str, ModelRef],
    backend: Backend,
    templates: TemplateSet | None = None,
    max_workers: int = 8,
) -> list[PseudoResponse]:
    """Fill the justified answer for every decidable pseudo-response.

    Tasks whose collaborators produced no extractable answer at all become
    undecidable; a single extractable answer is adopted directly (with its
    generation logprobs); two or more go through self-justification.
    """
    by_id = {r.id: r for r in tasks.records}
    can_echo_score = "score" in backend.capabilities()

    def run_one(pseudo: PseudoResponse) -> PseudoResponse:
        if pseudo.undecidable:
            return pseudo
        record = by_id.get(pseudo.task_id)
        if record is None:
            raise ValidationError(f"pseudo-response for unknown task {pseudo.task_id!r}")
        results = pseudo.per_collaborator
        extracted = [(r.config.index, r.answer) for r in results if r.answer is not None]
        if not extracted:
            pseudo.undecidable = True
            pseudo.meta["reason"] = "no extractable collaborator answers"
            return pseudo
        if len(extracted) == 1:
            slot = next(r for r in results if r.answer is not None)
            pseudo.justified_text = slot.text
            pseudo.justified_answer = slot.answer
            pseudo.justified_logprobs = slot.logprobs
            pseudo.meta["justify"] = "single"
            return pseudo
        text, answer, logprobs, meta = self_justify(
            record, extracted, models["warm"], backend, templates,
            allow_short_circuit=can_echo_score,
        )
        pseudo.justified_text = text
        pseudo.justified_answer = answer
        pseudo.justified_logprobs = logprobs
        pseudo.meta.update(meta)
        return pseudo

    return parallel_map(run_one, pseudos, max_workers=max_workers)


def generate_pseudo_responses(
    tasks: Dataset,
    configs: list[InferenceConfig],
    index: EmbeddingIndex | None,
    models: dict[str, ModelRef],
    backend: Backend,
    k: int = 3,
    templates: TemplateSet | None = None,
    max_workers: int = 8,
) -> list[PseudoResponse]:
    """Collaborative inference plus arbitration in one call."""
    pseudos = collect_responses(
        tasks, configs, index, models, backend, k=k, templates=templates, max_workers=max_workers
    )
    return arbitrate(pseudos, tasks, models, backend, templates=templates, max_workers=max_workers)


def save_pseudo_jsonl(pseudos: list[PseudoResponse], path: str | Path) -> None:
    """One pseudo-response per line, ascending task id."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as f:
        for pseudo in sorted(pseudos, key=lambda x: x.task_id):
            f.write(json.dumps(pseudo.to_obj(), ensure_ascii=False))
            f.write("\n")


def load_pseudo_jsonl(path: str | Path) -> list[PseudoResponse]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"pseudo-response file does not exist: {p}")
    out = []
    with p.open("r", encoding="utf-8") as f:
        for raw in f:
            if raw.strip():
                out.append(PseudoResponse.from_obj(json.loads(raw)))
    return out
