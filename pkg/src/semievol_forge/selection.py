"""Confidence scoring and adaptive selection of pseudo-responses.

Confidence is the mean per-token negative log-likelihood of the final
pseudo-response under the warm model (lower is more confident). The
selection threshold is the nearest-rank percentile of those values: sort
ascending and take the element at 1-based index ceil(theta/100 * M).
Filtering keeps entropy <= tau (inclusive).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from .backends.types import Backend, ModelRef
from .data import Dataset, TaskRecord
from .errors import CapabilityError, ValidationError
from .prompting import TemplateSet, render_task

if TYPE_CHECKING:  # pragma: no cover
    from .collab import PseudoResponse

ENTROPY_SOURCES = ("echo_scored", "generation_logprobs")


@dataclass(frozen=True)
class EntropyScore:
    task_id: str
    entropy: float
    token_count: int
    source: str

    def __post_init__(self) -> None:
        if self.source not in ENTROPY_SOURCES:
            raise ValidationError(f"unknown entropy source {self.source!r}")
        if self.token_count < 1:
            raise ValidationError("token count must be >= 1")
        if not math.isfinite(self.entropy) or self.entropy < 0:
            raise ValidationError(f"entropy must be finite and >= 0, got {self.entropy}")


@dataclass
class SelectionReport:
    tau: float
    theta: float | None
    kept_ids: list[str]
    dropped_ids: list[str]
    histogram: dict = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "tau": self.tau,
            "theta": self.theta,
            "kept": len(self.kept_ids),
            "dropped": len(self.dropped_ids),
            "kept_ids": self.kept_ids,
            "dropped_ids": self.dropped_ids,
            "histogram": self.histogram,
        }


def entropy(logprobs: list[float]) -> float:
    """Mean negative log-likelihood of a token sequence.

    All entries must be finite and <= 0 (they are log-probabilities).
    """
    if not logprobs:
        raise ValidationError("cannot compute entropy of an empty logprob list")
    for lp in logprobs:
        if not math.isfinite(lp) or lp > 0:
            raise ValidationError(f"logprobs must be finite and <= 0, got {lp}")
    return -sum(logprobs) / len(logprobs)


def percentile_threshold(values: list[float], theta: float) -> float:
    """Nearest-rank percentile of ``values`` at ``theta`` percent."""
    if not values:
        raise ValidationError("cannot take a percentile of an empty list")
    if not 0 < theta <= 100:
        raise ValidationError(f"theta must be in (0, 100], got {theta}")
    ordered = sorted(values)
    rank = math.ceil((theta / 100.0) * len(ordered))
    return ordered[rank - 1]


def score_pseudo(
    pseudo: "PseudoResponse",
    record: TaskRecord,
    warm: ModelRef,
    backend: Backend,
    templates: TemplateSet | None = None,
) -> EntropyScore:
    """Entropy of the justified response under the warm model.

    Echo-scoring (teacher forcing of the fixed text) is preferred; when the
    backend cannot echo-score, the justifier's generation-time logprobs are
    reused and the score is marked accordingly. With neither available the
    task is unscoreable.
    """
    if not pseudo.justified_text:
        raise ValidationError(f"pseudo-response {pseudo.task_id} has no justified text")
    if "score" in backend.capabilities():
        prompt = "\n\n".join(m["content"] for m in render_task(record, (), templates))
        logprobs = backend.score_completion(warm, prompt, pseudo.justified_text)
        return EntropyScore(
            task_id=pseudo.task_id,
            entropy=entropy(list(logprobs)),
            token_count=len(logprobs),
            source="echo_scored",
        )
    if pseudo.justified_logprobs:
        logprobs = list(pseudo.justified_logprobs)
        return EntropyScore(
            task_id=pseudo.task_id,
            entropy=entropy(logprobs),
            token_count=len(logprobs),
            source="generation_logprobs",
        )
    raise CapabilityError(
        f"no confidence source for task {pseudo.task_id}: backend lacks echo-scoring "
        "and the pseudo-response carries no generation logprobs"
    )


def select(
    pseudos: list["PseudoResponse"],
    tau: float,
    tasks: Dataset,
    theta: float | None = None,
) -> tuple[Dataset, SelectionReport]:
    """Keep pseudo-responses with entropy <= tau as newly labeled records.

    Returns the selected dataset (justified answer installed as gold,
    ascending task id) and a report whose kept/dropped ids partition the
    scored pool. Every pseudo must already be scored.
    """
    unscored = sorted(p.task_id for p in pseudos if p.entropy is None)
    if unscored:
        raise ValidationError(f"unscored pseudo-responses: {unscored}")

    by_id = {r.id: r for r in tasks.records}
    missing = sorted(p.task_id for p in pseudos if p.task_id not in by_id)
    if missing:
        raise ValidationError(f"pseudo-responses for unknown tasks: {missing}")

    kept: list[TaskRecord] = []
    kept_ids: list[str] = []
    dropped_ids: list[str] = []
    for p in sorted(pseudos, key=lambda p: p.task_id):
        if p.entropy <= tau:
            record = by_id[p.task_id]
            kept.append(replace(record, gold=p.justified_answer))
            kept_ids.append(p.task_id)
        else:
            dropped_ids.append(p.task_id)

    entropies = [p.entropy for p in pseudos]
    top = max(max(entropies), 1e-9) if entropies else 1e-9
    counts, edges = np.histogram(entropies, bins=20, range=(0.0, top))
    report = SelectionReport(
        tau=tau,
        theta=theta,
        kept_ids=kept_ids,
        dropped_ids=dropped_ids,
        histogram={
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
    )
    return Dataset(tuple(kept), provenance="selected"), report
