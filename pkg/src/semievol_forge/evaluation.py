"""Answer extraction, accuracy computation, and analysis reports.

Extraction is regex-based and total: unparseable text yields an extraction
failure value, never an exception, and failures count as incorrect. Numeric
comparison uses an absolute tolerance (default 1e-2). This module is also
the only reader of the sealed gold side-table for the unlabeled split;
pseudo-response accuracy against sealed golds is a diagnostic output and is
never fed back into a training stage.
"""
from __future__ import annotations

import json
import math
import re
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends.types import Backend, ChatRequest, EmbeddingRequest, ModelRef
from .concurrency import parallel_map
from .data import Answer, Dataset, TaskRecord
from .errors import SemiEvolError, ValidationError
from .prompting import (
    FREE_FORM_TEMPLATE,
    MULTIPLE_CHOICE_TEMPLATE,
    PromptTemplate,
    TemplateSet,
    render_task,
)
from .retrieval import EmbeddingIndex, knn
from .selection import entropy

_ANSWER_WORD = r"[Aa][Nn][Ss][Ww][Ee][Rr]"
_CHOICE_RE = re.compile(_ANSWER_WORD + r":\s*([A-J])\b")
_NUMERIC_RE = re.compile(_ANSWER_WORD + r":\s*([+-]?(?:\d[\d,]*(?:\.\d+)?|\.\d+))\s*(%)?")
_TEXT_RE = re.compile(_ANSWER_WORD + r":\s*(.+)")

DEFAULT_NUMERIC_TOL = 1e-2

# Five fixed instruction paraphrases (first is the canonical wording) so
# stability runs are reproducible. Only the leading instruction line varies;
# the answer-format contract stays identical.
INSTRUCTION_VARIANTS: tuple[tuple[str, str, str], ...] = (
    ("v1", "Answer the multiple-choice question.", "Answer the following question."),
    (
        "v2",
        "Choose the correct option for the multiple-choice question.",
        "Work out the following question.",
    ),
    (
        "v3",
        "Select the best answer to the multiple-choice question below.",
        "Compute the answer to the following question.",
    ),
    ("v4", "Read the question and pick the correct option.", "Solve the following question."),
    ("v5", "Solve the multiple-choice question below.", "Determine the answer to the question below."),
)


def extract_answer(text: str, kind: str) -> Answer | None:
    """Pull the final stated answer out of a response; None on failure.

    The last occurrence wins: models often restate, and the final statement
    is taken as the commitment.
    """
    if kind == "choice":
        matches = _CHOICE_RE.findall(text or "")
        if not matches:
            return None
        return Answer(kind="choice", choice=matches[-1])
    if kind == "numeric":
        matches = _NUMERIC_RE.findall(text or "")
        if not matches:
            return None
        raw, percent = matches[-1]
        try:
            value = float(raw.replace(",", ""))
        except ValueError:
            return None
        if percent:
            value /= 100.0
        if not math.isfinite(value):
            return None
        return Answer(kind="numeric", value=value)
    if kind == "text":
        matches = _TEXT_RE.findall(text or "")
        if not matches:
            return None
        stripped = matches[-1].strip()
        return Answer(kind="text", text=stripped) if stripped else None
    raise ValidationError(f"cannot extract answers of kind {kind!r}")


def expected_kind(record: TaskRecord) -> str:
    if record.options:
        return "choice"
    if record.gold is not None:
        return record.gold.kind
    return "numeric"


def judge(pred: Answer, gold: Answer, numeric_tol: float = DEFAULT_NUMERIC_TOL) -> bool:
    """Exact match for choices and text; absolute tolerance for numerics."""
    if pred.kind != gold.kind:
        return False
    if pred.kind == "choice":
        return pred.choice == gold.choice
    if pred.kind == "numeric":
        return abs(pred.value - gold.value) <= numeric_tol
    return pred.text.strip() == gold.text.strip()


@dataclass
class EvalReport:
    model: str
    accuracy: float
    n_scored: int
    n_correct: int
    per_category: dict[str, dict] = field(default_factory=dict)
    extraction_failures: list[str] = field(default_factory=list)
    kind_mismatches: list[str] = field(default_factory=list)
    backend_failures: list[str] = field(default_factory=list)
    mean_entropy: float | None = None
    entropy_histogram: dict | None = None
    prompt_variants: list[dict] | None = None
    variant_mean: float | None = None
    variant_std: float | None = None

    def to_obj(self) -> dict:
        return {
            "model": self.model,
            "accuracy": self.accuracy,
            "n_scored": self.n_scored,
            "n_correct": self.n_correct,
            "per_category": self.per_category,
            "extraction_failures": self.extraction_failures,
            "kind_mismatches": self.kind_mismatches,
            "backend_failures": self.backend_failures,
            "mean_entropy": self.mean_entropy,
            "entropy_histogram": self.entropy_histogram,
            "prompt_variants": self.prompt_variants,
            "variant_mean": self.variant_mean,
            "variant_std": self.variant_std,
        }


def variant_templates(variant: tuple[str, str, str]) -> TemplateSet:
    """Template set with the leading instruction line swapped for a paraphrase."""
    _, mc_line, ff_line = variant
    defaults = TemplateSet.default()
    mc_body = MULTIPLE_CHOICE_TEMPLATE.replace("Answer the multiple-choice question.", mc_line, 1)
    ff_body = FREE_FORM_TEMPLATE.replace("Answer the following question.", ff_line, 1)
    return TemplateSet(
        multiple_choice=PromptTemplate("multiple_choice", mc_body),
        free_form=PromptTemplate("free_form", ff_body),
        self_justify=defaults.self_justify,
        icl_preamble=defaults.icl_preamble,
    )


def _eval_pass(
    model: ModelRef,
    test: Dataset,
    backend: Backend,
    *,
    icl: EmbeddingIndex | None,
    k: int,
    templates: TemplateSet | None,
    numeric_tol: float,
    temperature: float,
    want_logprobs: bool,
    max_workers: int,
) -> dict:
    def run_one(record: TaskRecord) -> dict:
        refs: list[str] = []
        if icl is not None:
            query = backend.embed(EmbeddingRequest(texts=(record.question,)))[0]
            refs = [icl.example_for(tid) for tid, _ in knn(icl, query, k)]
        messages = render_task(record, refs, templates)
        try:
            resp = backend.chat(
                ChatRequest(
                    model=model,
                    messages=tuple(messages),
                    temperature=temperature,
                    want_logprobs=want_logprobs,
                )
            )
        except SemiEvolError as e:
            return {"id": record.id, "error": str(e)}
        out: dict = {"id": record.id, "text": resp.text}
        if resp.token_logprobs:
            out["entropy"] = entropy(resp.logprobs())
        return out

    rows = parallel_map(run_one, list(test.records), max_workers=max_workers)

    n_scored = 0
    n_correct = 0
    per_cat: dict[str, list[int]] = {}
    extraction_failures: list[str] = []
    kind_mismatches: list[str] = []
    backend_failures: list[str] = []
    entropies: list[float] = []
    for record, row in zip(test.records, rows):
        if record.gold is None:
            continue
        n_scored += 1
        category = record.meta.get("category", "uncategorized")
        bucket = per_cat.setdefault(category, [0, 0])
        bucket[0] += 1
        if "entropy" in row:
            entropies.append(row["entropy"])
        correct = False
        if "error" in row:
            backend_failures.append(record.id)
        else:
            pred = extract_answer(row["text"], expected_kind(record))
            if pred is None:
                extraction_failures.append(record.id)
            elif pred.kind != record.gold.kind:
                kind_mismatches.append(record.id)
            else:
                correct = judge(pred, record.gold, numeric_tol)
        if correct:
            n_correct += 1
            bucket[1] += 1
    return {
        "n_scored": n_scored,
        "n_correct": n_correct,
        "per_category": {
            cat: {"n": n, "accuracy": (c / n if n else 0.0)} for cat, (n, c) in per_cat.items()
        },
        "extraction_failures": extraction_failures,
        "kind_mismatches": kind_mismatches,
        "backend_failures": backend_failures,
        "entropies": entropies,
    }


def evaluate(
    model: ModelRef,
    test: Dataset,
    backend: Backend,
    *,
    icl: EmbeddingIndex | None = None,
    variants: int = 1,
    k: int = 3,
    numeric_tol: float = DEFAULT_NUMERIC_TOL,
    temperature: float = 0.0,
    want_logprobs: bool = True,
    max_workers: int = 8,
) -> EvalReport:
    """Accuracy of one model on the test split at temperature 0.

    With ``variants > 1`` the pass is repeated under that many fixed
    instruction paraphrases and the report carries per-variant accuracies
    plus their mean and standard deviation.
    """
    if len(test) == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    if not 1 <= variants <= len(INSTRUCTION_VARIANTS):
        raise ValidationError(f"variants must be in 1..{len(INSTRUCTION_VARIANTS)}")

    first = _eval_pass(
        model, test, backend, icl=icl, k=k, templates=None, numeric_tol=numeric_tol,
        temperature=temperature, want_logprobs=want_logprobs, max_workers=max_workers,
    )
    accuracy = first["n_correct"] / first["n_scored"] if first["n_scored"] else 0.0
    entropies = first["entropies"]
    histogram = None
    mean_entropy = None
    if entropies:
        mean_entropy = float(np.mean(entropies))
        top = max(max(entropies), 1e-9)
        counts, edges = np.histogram(entropies, bins=20, range=(0.0, top))
        histogram = {"bin_edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}

    report = EvalReport(
        model=model.name,
        accuracy=accuracy,
        n_scored=first["n_scored"],
        n_correct=first["n_correct"],
        per_category=first["per_category"],
        extraction_failures=first["extraction_failures"],
        kind_mismatches=first["kind_mismatches"],
        backend_failures=first["backend_failures"],
        mean_entropy=mean_entropy,
        entropy_histogram=histogram,
    )

    if variants > 1:
        variant_rows = [{"name": INSTRUCTION_VARIANTS[0][0], "accuracy": accuracy}]
        for variant in INSTRUCTION_VARIANTS[1:variants]:
            run = _eval_pass(
                model, test, backend, icl=icl, k=k,
                templates=variant_templates(variant), numeric_tol=numeric_tol,
                temperature=temperature, want_logprobs=want_logprobs, max_workers=max_workers,
            )
            acc = run["n_correct"] / run["n_scored"] if run["n_scored"] else 0.0
            variant_rows.append({"name": variant[0], "accuracy": acc})
        values = [row["accuracy"] for row in variant_rows]
        report.prompt_variants = variant_rows
        report.variant_mean = statistics.fmean(values)
        report.variant_std = statistics.pstdev(values)
    return report


def load_sealed(path: str | Path) -> dict[str, Answer]:
    """Read the sealed gold side-table. Diagnostics only: training stages
    must never touch this."""
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"sealed side-table does not exist: {p}")
    golds: dict[str, Answer] = {}
    with p.open("r", encoding="utf-8") as f:
        for raw in f:
            if not raw.strip():
                continue
            obj = json.loads(raw)
            if "answer" in obj:
                golds[obj["id"]] = Answer.from_obj(obj["answer"])
    return golds


def pseudo_label_accuracy(
    answers: dict[str, Answer], sealed: dict[str, Answer], numeric_tol: float = DEFAULT_NUMERIC_TOL
) -> tuple[float, dict[str, bool]]:
    """Fraction of pseudo answers matching the sealed golds (diagnostic)."""
    verdicts: dict[str, bool] = {}
    for task_id, pred in answers.items():
        gold = sealed.get(task_id)
        if gold is None:
            continue
        verdicts[task_id] = judge(pred, gold, numeric_tol)
    if not verdicts:
        return 0.0, verdicts
    return sum(verdicts.values()) / len(verdicts), verdicts


def export_category_csv(report: EvalReport, path: str | Path) -> None:
    """Plot-ready per-category accuracy export."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = ["category,n,accuracy"]
    for cat in sorted(report.per_category):
        row = report.per_category[cat]
        lines.append(f"{cat},{row['n']},{row['accuracy']:.6f}")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_entropy_csv(report: EvalReport, path: str | Path) -> None:
    """Plot-ready entropy histogram export."""
    if report.entropy_histogram is None:
        raise ValidationError("report carries no entropy histogram")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    edges = report.entropy_histogram["bin_edges"]
    counts = report.entropy_histogram["counts"]
    lines = ["bin_start,bin_end,count"]
    for i, count in enumerate(counts):
        lines.append(f"{edges[i]:.6f},{edges[i + 1]:.6f},{count}")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
