"""Synthetic task worlds for desk-scale verification.

Tasks are grouped into knowledge clusters. Every question text embeds its
own task id, which is what the simulated backend parses to decide behavior:
no attempt is made to simulate language. The embedding function maps
same-cluster tasks to nearby vectors and cross-cluster tasks to distant
ones, so reference retrieval is consequential.
"""
from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field

from ..data import Answer, Dataset, TaskRecord
from ..errors import ValidationError

TASK_ID_RE = re.compile(r"\b(c\d{2,}-q\d{3,})\b")
OPTION_COUNT = 4
_FILLER_POOL = (
    "Weighing", "each", "candidate", "statement", "against", "the",
    "available", "evidence", "and", "its", "cluster", "context.",
)


@dataclass(frozen=True)
class OracleSpec:
    """Behavioral parameters of the simulated model family.

    ``accuracy_base``/``accuracy_warm`` are the flat accuracies of the two
    pre-registered models. Fine-tuning moves per-cluster accuracy by
    ``finetune_gain`` times a signed coverage: correct training labels count
    +1, wrong ones count -``noise_penalty``, divided by ``saturation``.
    Correct responses draw per-token NLL around ``correct_nll_mean``,
    incorrect ones around ``incorrect_nll_mean``; ``miscalibrated`` swaps the
    two bands to demonstrate selection failure modes.
    """

    accuracy_base: float = 0.45
    accuracy_warm: float = 0.65
    icl_bonus: float = 0.10
    finetune_gain: float = 0.35
    saturation: int = 30
    noise_penalty: float = 3.0
    correct_nll_mean: float = 0.45
    correct_nll_spread: float = 0.35
    incorrect_nll_mean: float = 0.95
    incorrect_nll_spread: float = 0.35
    miscalibrated: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("accuracy_base", "accuracy_warm"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {value}")
        if self.accuracy_warm < self.accuracy_base:
            raise ValidationError("warm accuracy must be >= base accuracy")
        if self.icl_bonus < 0:
            raise ValidationError("icl_bonus must be >= 0")
        if self.saturation < 1:
            raise ValidationError("saturation must be >= 1")
        for name in ("correct_nll_mean", "incorrect_nll_mean"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")
        if self.correct_nll_mean - self.correct_nll_spread <= 0:
            raise ValidationError("correct NLL band must stay positive")
        if self.incorrect_nll_mean - self.incorrect_nll_spread <= 0:
            raise ValidationError("incorrect NLL band must stay positive")

    def nll_band(self, correct: bool) -> tuple[float, float]:
        flipped = correct != self.miscalibrated
        if flipped:
            return self.correct_nll_mean, self.correct_nll_spread
        return self.incorrect_nll_mean, self.incorrect_nll_spread

    def to_obj(self) -> dict:
        return {
            "accuracy_base": self.accuracy_base,
            "accuracy_warm": self.accuracy_warm,
            "icl_bonus": self.icl_bonus,
            "finetune_gain": self.finetune_gain,
            "saturation": self.saturation,
            "noise_penalty": self.noise_penalty,
            "correct_nll_mean": self.correct_nll_mean,
            "correct_nll_spread": self.correct_nll_spread,
            "incorrect_nll_mean": self.incorrect_nll_mean,
            "incorrect_nll_spread": self.incorrect_nll_spread,
            "miscalibrated": self.miscalibrated,
            "seed": self.seed,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "OracleSpec":
        return cls(**obj)


@dataclass(frozen=True)
class SyntheticTask:
    cluster: int
    record: TaskRecord


def task_id(cluster: int, index: int) -> str:
    return f"c{cluster:02d}-q{index:03d}"


def gen_tasks(clusters: int, per_cluster: int, seed: int) -> Dataset:
    """Deterministic multiple-choice tasks, ``per_cluster`` in each cluster.

    Gold letters are uniform over the four options.
    """
    if clusters < 1 or per_cluster < 1:
        raise ValidationError("clusters and per_cluster must be >= 1")
    rng = random.Random(seed)
    records = []
    letters = "ABCD"
    for c in range(clusters):
        for i in range(per_cluster):
            tid = task_id(c, i)
            gold = letters[rng.randrange(OPTION_COUNT)]
            options = tuple(
                (letter, f"candidate {letter.lower()} for item {tid}") for letter in letters
            )
            records.append(
                TaskRecord(
                    id=tid,
                    question=f"Synthetic item {tid}: which candidate statement holds?",
                    options=options,
                    gold=Answer(kind="choice", choice=gold),
                    meta={"category": f"cluster-{c:02d}"},
                )
            )
    return Dataset(tuple(records), provenance=f"simlab(clusters={clusters},per={per_cluster},seed={seed})")


@dataclass
class SyntheticWorld:
    """A generated task set plus the oracle parameters governing behavior."""

    clusters: int
    per_cluster: int
    seed: int
    oracle: OracleSpec
    tasks: Dataset = field(init=False)
    _gold: dict[str, str] = field(init=False, default_factory=dict)
    _cluster: dict[str, int] = field(init=False, default_factory=dict)

    def __post_init__(self) -> None:
        self.tasks = gen_tasks(self.clusters, self.per_cluster, self.seed)
        for record in self.tasks:
            self._gold[record.id] = record.gold.choice
            self._cluster[record.id] = int(record.meta["category"].split("-")[1])

    def gold_letter(self, tid: str) -> str:
        if tid not in self._gold:
            raise ValidationError(f"unknown synthetic task {tid!r}")
        return self._gold[tid]

    def cluster_of(self, tid: str) -> int:
        if tid not in self._cluster:
            raise ValidationError(f"unknown synthetic task {tid!r}")
        return self._cluster[tid]

    def knows(self, tid: str) -> bool:
        return tid in self._gold

    def option_letters(self) -> str:
        return "ABCD"

    def embedding_dimension(self) -> int:
        return self.clusters + 6

    def to_obj(self) -> dict:
        return {
            "clusters": self.clusters,
            "per_cluster": self.per_cluster,
            "seed": self.seed,
            "oracle": self.oracle.to_obj(),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "SyntheticWorld":
        return cls(
            clusters=obj["clusters"],
            per_cluster=obj["per_cluster"],
            seed=obj["seed"],
            oracle=OracleSpec.from_obj(obj["oracle"]),
        )


def find_task_ids(text: str) -> list[str]:
    return TASK_ID_RE.findall(text or "")


def filler_words(count: int, offset: int) -> list[str]:
    return [_FILLER_POOL[(offset + i) % len(_FILLER_POOL)] for i in range(count)]


def expected_accuracy(
    world: SyntheticWorld, model_accuracy: float, refs_same_cluster: int = 0
) -> float:
    """Closed-form per-task correctness probability, for test oracles."""
    p = model_accuracy + world.oracle.icl_bonus * refs_same_cluster
    return min(1.0, max(0.0, p))


def uniformity_sigma(n: int, categories: int) -> float:
    """Std dev of one category count under a uniform multinomial draw."""
    p = 1.0 / categories
    return math.sqrt(n * p * (1 - p))
