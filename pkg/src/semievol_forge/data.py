"""Dataset types, JSONL ingestion/emission, deterministic splitting and merging.

A task record is a multiple-choice or free-form QA instance. Datasets are
immutable after load: every operation returns a new value, so they are safe
to share across concurrent readers.

Storage schema (one JSON object per line, UTF-8)::

    {"id": ..., "question": ..., "options": [{"letter": "A", "text": ...}],
     "answer": {"kind": ...}, "meta": {...}}

``options``, ``answer`` and ``meta`` are omitted when empty. Splitting a
dataset strips gold answers from the unlabeled partition's working copy and
retains them in a sealed side-table (``<name>.sealed.jsonl``) that only the
evaluation module reads, for diagnostics.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator

from .errors import ParseError, ValidationError

OPTION_LETTERS = "ABCDEFGHIJ"
SPLITS = ("labeled", "unlabeled", "test")
ANSWER_KINDS = ("choice", "numeric", "text")


@dataclass(frozen=True)
class Answer:
    """A gold or predicted answer. Exactly the field matching ``kind`` is set."""

    kind: str
    choice: str | None = None
    value: float | None = None
    text: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ANSWER_KINDS:
            raise ValidationError(f"unknown answer kind {self.kind!r}")
        payload = {"choice": self.choice, "numeric": self.value, "text": self.text}
        for kind, value in payload.items():
            if (value is not None) != (kind == self.kind):
                raise ValidationError(
                    f"answer of kind {self.kind!r} must populate exactly the matching field"
                )
        if self.kind == "choice" and self.choice not in OPTION_LETTERS:
            raise ValidationError(f"choice answer must be a letter A..J, got {self.choice!r}")
        if self.kind == "numeric" and not math.isfinite(self.value):
            raise ValidationError("numeric answer must be finite")

    def canonical(self) -> str:
        """Short text form, as written after 'Answer:' in prompts and payloads."""
        if self.kind == "choice":
            return self.choice
        if self.kind == "numeric":
            v = float(self.value)
            return str(int(v)) if v.is_integer() else repr(v)
        return self.text

    def to_obj(self) -> dict:
        obj: dict = {"kind": self.kind}
        if self.kind == "choice":
            obj["choice"] = self.choice
        elif self.kind == "numeric":
            obj["value"] = self.value
        else:
            obj["text"] = self.text
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "Answer":
        return cls(
            kind=obj.get("kind", ""),
            choice=obj.get("choice"),
            value=obj.get("value"),
            text=obj.get("text"),
        )


@dataclass(frozen=True)
class TaskRecord:
    """One task instance: prompt text, optional options and gold answer."""

    id: str
    question: str
    options: tuple[tuple[str, str], ...] = ()
    gold: Answer | None = None
    split: str | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("record id must be non-empty")
        letters = [letter for letter, _ in self.options]
        if letters != list(OPTION_LETTERS[: len(letters)]):
            raise ValidationError(
                f"record {self.id!r}: option letters must increase from 'A' with no gaps, got {letters}"
            )
        if self.gold is not None and self.options:
            if self.gold.kind != "choice" or self.gold.choice not in letters:
                raise ValidationError(
                    f"record {self.id!r}: gold answer must be one of the option letters"
                )
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError(f"record {self.id!r}: unknown split {self.split!r}")

    def to_obj(self) -> dict:
        obj: dict = {"id": self.id, "question": self.question}
        if self.options:
            obj["options"] = [{"letter": l, "text": t} for l, t in self.options]
        if self.gold is not None:
            obj["answer"] = self.gold.to_obj()
        if self.meta:
            obj["meta"] = dict(self.meta)
        return obj


@dataclass(frozen=True)
class Dataset:
    """Ordered, id-unique collection of task records."""

    records: tuple[TaskRecord, ...]
    provenance: str = ""

    def __post_init__(self) -> None:
        seen: dict[str, int] = {}
        dupes: list[str] = []
        for r in self.records:
            if r.id in seen:
                dupes.append(r.id)
            seen[r.id] = 1
        if dupes:
            raise ValidationError(f"duplicate record ids: {sorted(set(dupes))}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TaskRecord]:
        return iter(self.records)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self, record_id: str) -> TaskRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise KeyError(record_id)

    def with_split(self, split: str) -> "Dataset":
        return Dataset(
            records=tuple(replace(r, split=split) for r in self.records),
            provenance=self.provenance,
        )


@dataclass(frozen=True)
class SplitResult:
    """Three disjoint partitions plus the sealed gold table for the unlabeled one."""

    labeled: Dataset
    unlabeled: Dataset
    test: Dataset
    sealed: Dataset


def _record_from_obj(obj: dict, *, path: str, line: int, default_id: str) -> tuple[TaskRecord, bool]:
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", path=path, line=line)
    question = obj.get("question")
    if not isinstance(question, str):
        raise ParseError("record is missing a string 'question' field", path=path, line=line)
    record_id = obj.get("id")
    explicit = record_id is not None
    if not explicit:
        record_id = default_id
    options_obj = obj.get("options", [])
    if not isinstance(options_obj, list):
        raise ParseError("'options' must be a list", path=path, line=line)
    options = []
    for opt in options_obj:
        if not isinstance(opt, dict) or "letter" not in opt or "text" not in opt:
            raise ParseError(
                "each option must be an object with 'letter' and 'text'", path=path, line=line
            )
        options.append((opt["letter"], opt["text"]))
    answer_obj = obj.get("answer")
    gold = Answer.from_obj(answer_obj) if answer_obj is not None else None
    meta = obj.get("meta", {})
    if not isinstance(meta, dict):
        raise ParseError("'meta' must be an object", path=path, line=line)
    try:
        record = TaskRecord(
            id=str(record_id),
            question=question,
            options=tuple(options),
            gold=gold,
            meta={str(k): str(v) for k, v in meta.items()},
        )
    except ValidationError as e:
        raise ParseError(str(e), path=path, line=line) from e
    return record, explicit


def load_jsonl(path: str | Path) -> Dataset:
    """Load a dataset from a JSONL file, preserving line order.

    Missing ids are synthesized deterministically as ``<filestem>-<line#>``.
    A malformed line raises :class:`ParseError` naming the line; an explicit
    duplicate id raises :class:`ValidationError`.
    """
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"dataset file does not exist: {p}")
    records: list[TaskRecord] = []
    explicit_seen: dict[str, int] = {}
    with p.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"malformed JSON ({e.msg})", path=str(p), line=lineno) from e
            record, explicit = _record_from_obj(
                obj, path=str(p), line=lineno, default_id=f"{p.stem}-{lineno}"
            )
            if explicit:
                if record.id in explicit_seen:
                    raise ValidationError(
                        f"{p}: duplicate id {record.id!r} on lines "
                        f"{explicit_seen[record.id]} and {lineno}"
                    )
                explicit_seen[record.id] = lineno
            records.append(record)
    return Dataset(records=tuple(records), provenance=str(p))


def dump_jsonl(dataset: Dataset, path: str | Path) -> None:
    """Emit the dataset in canonical form, one record per line."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as f:
        for r in dataset.records:
            f.write(json.dumps(r.to_obj(), ensure_ascii=False))
            f.write("\n")


def split(dataset: Dataset, weights: tuple[float, float, float], seed: int) -> SplitResult:
    """Partition into (labeled, unlabeled, test) by weight, deterministically.

    Partition sizes are floor(w_i * N / sum(w)) with the remainder assigned
    in order labeled, unlabeled, test. The shuffle is a pure function of
    ``seed``; records keep their original dataset order within each
    partition. Gold answers are removed from the unlabeled working copy and
    returned in ``sealed`` instead.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot split an empty dataset")
    if len(weights) != 3 or any(w <= 0 for w in weights):
        raise ValidationError(f"split weights must be three positive numbers, got {weights}")
    if len(dataset) < 3:
        raise ValidationError("need at least 3 records to split")

    n = len(dataset)
    fw = [Fraction(str(float(w))) for w in weights]
    total = sum(fw)
    sizes = [int((w * n) / total) for w in fw]
    for i in range(n - sum(sizes)):
        sizes[i] += 1

    order = list(range(n))
    random.Random(seed).shuffle(order)
    bounds = (sizes[0], sizes[0] + sizes[1])
    assignment = {}
    for pos, original_index in enumerate(order):
        if pos < bounds[0]:
            assignment[original_index] = "labeled"
        elif pos < bounds[1]:
            assignment[original_index] = "unlabeled"
        else:
            assignment[original_index] = "test"

    parts: dict[str, list[TaskRecord]] = {s: [] for s in SPLITS}
    sealed: list[TaskRecord] = []
    for i, record in enumerate(dataset.records):
        name = assignment[i]
        tagged = replace(record, split=name)
        if name == "unlabeled":
            sealed.append(tagged)
            tagged = replace(tagged, gold=None)
        parts[name].append(tagged)

    src = dataset.provenance or "dataset"
    return SplitResult(
        labeled=Dataset(tuple(parts["labeled"]), provenance=f"{src}:labeled"),
        unlabeled=Dataset(tuple(parts["unlabeled"]), provenance=f"{src}:unlabeled"),
        test=Dataset(tuple(parts["test"]), provenance=f"{src}:test"),
        sealed=Dataset(tuple(sealed), provenance=f"{src}:unlabeled.sealed"),
    )


def merge(a: Dataset, b: Dataset) -> Dataset:
    """Concatenate two datasets with disjoint id sets, a then b."""
    overlap = sorted(set(a.ids()) & set(b.ids()))
    if overlap:
        raise ValidationError(f"cannot merge datasets with overlapping ids: {overlap}")
    return Dataset(
        records=a.records + b.records,
        provenance=f"{a.provenance or 'a'}+{b.provenance or 'b'}",
    )
