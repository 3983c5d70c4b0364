"""End-to-end evolution rounds with persisted, resumable stage state.

One round runs: warm-up fine-tune on labeled data, embedding index build,
collaborative inference over the unlabeled pool, arbitration, confidence
scoring, percentile selection, final fine-tune of the base model on labeled
plus selected data, and evaluation of base/warm/evolved on the test split.
Each stage persists its artifacts and advances ``state.json`` before the
next stage starts, so a killed run resumes at the recorded stage with
identical outputs (all stage randomness derives from the root seed, the
round number, and the stage name).

Multi-round iteration rolls the pools over between rounds: selected records
join the labeled set as new labeled data and leave the unlabeled pool. Each
round re-warms from the base model with the enlarged labeled set.

Working directory layout::

    state.json  config snapshot + stage + model names + round history
    labeled.jsonl / unlabeled.jsonl / unlabeled.sealed.jsonl / test.jsonl
    labeled.index.jsonl  persisted embedding index
    pseudo.jsonl / selected.jsonl / selection_report.json / eval_report.json
    journal.jsonl  request journal (append-only, all rounds)
    payloads/  fine-tune payload files plus .meta.json id manifests
    rounds/round-NN/  per-round artifact archive
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from . import collab, selection
from .backends.http import wait_for_job
from .backends.journal import JournaledBackend, RequestJournal
from .backends.types import EmbeddingRequest, ModelRef, request_fingerprint
from .concurrency import parallel_map
from .data import Dataset, TaskRecord, dump_jsonl, load_jsonl, merge
from .errors import CapabilityError, ValidationError
from .evaluation import evaluate
from .prompting import TemplateSet, render_task
from .retrieval import build_index, load_index, save_index

log = logging.getLogger("semievol")

STAGES = (
    "init",
    "warmed",
    "indexed",
    "inferred",
    "justified",
    "scored",
    "selected",
    "evolved",
    "evaluated",
)
STAGE_ORDER = {name: i for i, name in enumerate(STAGES)}

SYSTEM_TRAIN_MESSAGE = "You are an expert in the question answering."

FILES = {
    "state": "state.json",
    "labeled": "labeled.jsonl",
    "unlabeled": "unlabeled.jsonl",
    "sealed": "unlabeled.sealed.jsonl",
    "test": "test.jsonl",
    "index": "labeled.index.jsonl",
    "pseudo": "pseudo.jsonl",
    "selected": "selected.jsonl",
    "selection_report": "selection_report.json",
    "eval_report": "eval_report.json",
    "journal": "journal.jsonl",
}


def stage_seed(root_seed: int, round_no: int, stage: str) -> int:
    digest = hashlib.blake2b(
        f"{root_seed}:{round_no}:{stage}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class PipelineConfig:
    """Run settings; snapshotted into the state file and immutable per round."""

    n: int = 4
    k: int = 3
    theta: float = 50.0
    epochs: int = 2
    seed: int = 0
    tau_source: str = "unlabeled"
    numeric_tol: float = 1e-2
    concurrency: int = 8
    collab_temperature: float = 1.0
    finetune_poll_interval: float = 1.0
    ablate_icl: bool = False
    ablate_selection: bool = False

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not 0 < self.theta <= 100:
            raise ValidationError(f"theta must be in (0, 100], got {self.theta}")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.tau_source not in ("unlabeled", "labeled"):
            raise ValidationError(f"tau_source must be 'unlabeled' or 'labeled', got {self.tau_source!r}")
        if self.concurrency < 1:
            raise ValidationError("concurrency must be >= 1")

    def snapshot_obj(self) -> dict:
        """The semantic settings frozen into the state file for one round.

        Operational knobs (concurrency, poll interval) may vary across
        resumes without breaking the snapshot-immutability invariant.
        """
        return {
            "n": self.n,
            "k": self.k,
            "theta": self.theta,
            "epochs": self.epochs,
            "seed": self.seed,
            "tau_source": self.tau_source,
            "numeric_tol": self.numeric_tol,
            "collab_temperature": self.collab_temperature,
            "ablate_icl": self.ablate_icl,
            "ablate_selection": self.ablate_selection,
        }

    def to_obj(self) -> dict:
        obj = self.snapshot_obj()
        obj["concurrency"] = self.concurrency
        obj["finetune_poll_interval"] = self.finetune_poll_interval
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "PipelineConfig":
        return cls(**obj)

    def effective_theta(self) -> float:
        return 100.0 if self.ablate_selection else self.theta


@dataclass
class PipelineState:
    round: int = 1
    stage: str = "init"
    models: dict = field(default_factory=lambda: {"base": None, "warm": None, "evolved": None})
    config: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    stopped: str | None = None

    def advance(self, new_stage: str) -> None:
        if new_stage not in STAGE_ORDER:
            raise ValidationError(f"unknown stage {new_stage!r}")
        if STAGE_ORDER[new_stage] <= STAGE_ORDER[self.stage]:
            raise ValidationError(
                f"stage transitions are strictly forward: {self.stage} -> {new_stage}"
            )
        self.stage = new_stage
        self.timestamps[new_stage] = datetime.now(timezone.utc).isoformat()

    def to_obj(self) -> dict:
        return {
            "round": self.round,
            "stage": self.stage,
            "models": self.models,
            "config": self.config,
            "timestamps": self.timestamps,
            "history": self.history,
            "stopped": self.stopped,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "PipelineState":
        return cls(
            round=obj["round"],
            stage=obj["stage"],
            models=obj.get("models", {}),
            config=obj.get("config", {}),
            timestamps=obj.get("timestamps", {}),
            history=obj.get("history", []),
            stopped=obj.get("stopped"),
        )

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_obj(), indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Path) -> "PipelineState":
        return cls.from_obj(json.loads(path.read_text(encoding="utf-8")))


class WorkdirLock:
    """One pipeline per working directory."""

    def __init__(self, workdir: Path):
        self.path = Path(workdir) / ".lock"

    def __enter__(self) -> "WorkdirLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValidationError(
                f"working directory is locked by another pipeline ({self.path}); "
                "remove the lock file if that run is dead"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc_info) -> None:
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def build_finetune_payload(
    dataset: Dataset, path: Path, templates: TemplateSet | None = None
) -> dict:
    """Write a chat-format fine-tune payload plus its id manifest sidecar.

    Every record needs a gold (or pseudo-gold) answer; the assistant turn is
    the canonical ``Answer: <X>`` form.
    """
    missing = [r.id for r in dataset if r.gold is None]
    if missing:
        raise ValidationError(f"cannot build training payload, records without answers: {missing}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for record in dataset.records:
            user = render_task(record, (), templates)[-1]["content"]
            obj = {
                "messages": [
                    {"role": "system", "content": SYSTEM_TRAIN_MESSAGE},
                    {"role": "user", "content": user},
                    {"role": "assistant", "content": f"Answer: {record.gold.canonical()}"},
                ]
            }
            f.write(json.dumps(obj, ensure_ascii=False))
            f.write("\n")
    meta = {
        "task_ids": dataset.ids(),
        "count": len(dataset),
        "source": dataset.provenance,
    }
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(meta, indent=2), encoding="utf-8"
    )
    return meta


class Pipeline:
    """Drives one working directory through evolution rounds."""

    def __init__(
        self,
        workdir: str | Path,
        backend,
        base_model: ModelRef,
        config: PipelineConfig,
        finetuner=None,
        templates: TemplateSet | None = None,
    ):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        if isinstance(backend, JournaledBackend):
            self.backend = backend
        else:
            self.backend = JournaledBackend(
                backend,
                RequestJournal(self.workdir / FILES["journal"]),
                max_in_flight=config.concurrency,
            )
        self.finetuner = finetuner
        self.base_model = base_model
        self.config = config
        self.templates = templates
        self.state_path = self.workdir / FILES["state"]
        if self.state_path.exists():
            self.state = PipelineState.load(self.state_path)
            if self.state.config and self.state.config != config.snapshot_obj():
                raise ValidationError(
                    "configuration differs from the run's recorded snapshot; "
                    "the config is immutable within a round"
                )
        else:
            self.state = PipelineState(config=config.snapshot_obj())
            self.state.models["base"] = base_model.name
            self.state.timestamps["init"] = datetime.now(timezone.utc).isoformat()
            self.state.save(self.state_path)

    # -- helpers -------------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.workdir / FILES[name]

    def _save(self) -> None:
        self.state.save(self.state_path)

    def _load_dataset(self, name: str, split_tag: str | None = None) -> Dataset:
        ds = load_jsonl(self.path(name))
        # keep provenance workdir-relative so artifacts replay byte-identically
        ds = Dataset(ds.records, provenance=FILES[name])
        if split_tag:
            ds = ds.with_split(split_tag)
        return ds

    def _model(self, role: str) -> ModelRef:
        name = self.state.models.get(role)
        if not name:
            raise ValidationError(f"no {role} model recorded in state")
        return ModelRef(name=name, role=role, backend=self.backend.name)

    def _seed(self, stage: str) -> int:
        return stage_seed(self.config.seed, self.state.round, stage)

    def _run_finetune(
        self, base: ModelRef, payload_path: Path, role: str, task_ids: list[str]
    ) -> ModelRef:
        if self.finetuner is not None:
            job = self.finetuner.start_finetune(
                base, payload_path, self.config.epochs, result_role=role
            )
            self.backend.journal.append(
                {
                    "ts": datetime.now(timezone.utc).timestamp(),
                    "kind": "finetune",
                    "model": base.name,
                    "request": {
                        "model": base.name,
                        "training_file": str(payload_path),
                        "epochs": self.config.epochs,
                        "result_role": role,
                    },
                    "request_fingerprint": request_fingerprint(
                        {"model": base.name, "training_file": str(payload_path)}
                    ),
                    "response_fingerprint": "",
                    "latency_ms": 0.0,
                    "ok": job.status != "failed",
                    "task_ids": task_ids,
                    "job_id": job.id,
                }
            )
        else:
            job = self.backend.start_finetune(
                base, payload_path, self.config.epochs, result_role=role, task_ids=task_ids
            )
        job = wait_for_job(
            self.finetuner or self.backend, job,
            poll_interval=self.config.finetune_poll_interval,
        )
        return job.result

    # -- stages ----------------------------------------------------------------

    def _stage_warmup(self) -> None:
        labeled = self._load_dataset("labeled", "labeled")
        unlabeled = self._load_dataset("unlabeled", "unlabeled")
        if len(labeled) == 0:
            raise ValidationError("labeled pool is empty")
        if len(unlabeled) == 0:
            raise ValidationError("unlabeled pool is empty")
        overlap = set(labeled.ids()) & set(unlabeled.ids())
        if overlap:
            raise ValidationError(f"labeled and unlabeled pools overlap: {sorted(overlap)[:5]}")
        payload = self.workdir / "payloads" / f"warmup-round-{self.state.round:02d}.jsonl"
        build_finetune_payload(labeled, payload, self.templates)
        warm = self._run_finetune(self.base_model, payload, "warm", labeled.ids())
        self.state.models["warm"] = warm.name
        self.state.advance("warmed")
        self._save()

    def _stage_index(self) -> None:
        labeled = self._load_dataset("labeled", "labeled")

        def embed_batch(texts: list[str]) -> list[list[float]]:
            return self.backend.embed(EmbeddingRequest(texts=tuple(texts)))

        index = build_index(labeled, embed_batch)
        save_index(index, self.path("index"))
        self.state.advance("indexed")
        self._save()

    def _collab_configs(self) -> list[collab.InferenceConfig]:
        if self.config.n == 1:
            configs = collab.single_config(self._seed("configs"), self.config.collab_temperature)
        else:
            configs = collab.sample_configs(
                self.config.n, self._seed("configs"), self.config.collab_temperature
            )
        if self.config.ablate_icl:
            configs = [replace(c, ref_count=0) for c in configs]
        return configs

    def _stage_infer(self) -> None:
        unlabeled = self._load_dataset("unlabeled", "unlabeled")
        configs = self._collab_configs()
        index = None
        if any(c.ref_count > 0 for c in configs):
            index = load_index(self.path("index"))
        models = {"base": self.base_model, "warm": self._model("warm")}
        pseudos = collab.collect_responses(
            unlabeled,
            configs,
            index,
            models,
            self.backend,
            k=self.config.k,
            templates=self.templates,
            max_workers=self.config.concurrency,
        )
        collab.save_pseudo_jsonl(pseudos, self.path("pseudo"))
        self.state.advance("inferred")
        self._save()

    def _stage_justify(self) -> None:
        unlabeled = self._load_dataset("unlabeled", "unlabeled")
        pseudos = collab.load_pseudo_jsonl(self.path("pseudo"))
        models = {"base": self.base_model, "warm": self._model("warm")}
        pseudos = collab.arbitrate(
            pseudos, unlabeled, models, self.backend,
            templates=self.templates, max_workers=self.config.concurrency,
        )
        collab.save_pseudo_jsonl(pseudos, self.path("pseudo"))
        self.state.advance("justified")
        self._save()

    def _stage_score(self) -> None:
        unlabeled = self._load_dataset("unlabeled", "unlabeled")
        by_id = {r.id: r for r in unlabeled.records}
        pseudos = collab.load_pseudo_jsonl(self.path("pseudo"))
        warm = self._model("warm")

        def score_one(pseudo: collab.PseudoResponse) -> collab.PseudoResponse:
            if pseudo.undecidable or pseudo.justified_answer is None:
                return pseudo
            try:
                score = selection.score_pseudo(
                    pseudo, by_id[pseudo.task_id], warm, self.backend, self.templates
                )
            except CapabilityError as e:
                pseudo.meta["unscoreable"] = str(e)
                return pseudo
            pseudo.entropy = score.entropy
            pseudo.token_count = score.token_count
            pseudo.entropy_source = score.source
            return pseudo

        pseudos = parallel_map(score_one, pseudos, max_workers=self.config.concurrency)
        collab.save_pseudo_jsonl(pseudos, self.path("pseudo"))
        self.state.advance("scored")
        self._save()

    def _labeled_tau(self, labeled: Dataset, warm: ModelRef) -> float:
        """Threshold from gold-response entropies on the labeled pool."""
        if "score" not in self.backend.capabilities():
            raise ValidationError(
                "tau_source=labeled needs an echo-scoring backend to score gold responses"
            )

        def score_one(record: TaskRecord) -> float:
            prompt = "\n\n".join(
                m["content"] for m in render_task(record, (), self.templates)
            )
            logprobs = self.backend.score_completion(
                warm, prompt, f"Answer: {record.gold.canonical()}"
            )
            return selection.entropy(list(logprobs))

        entropies = parallel_map(score_one, list(labeled.records), max_workers=self.config.concurrency)
        return selection.percentile_threshold(entropies, self.config.effective_theta())

    def _stage_select(self) -> None:
        unlabeled = self._load_dataset("unlabeled", "unlabeled")
        pseudos = collab.load_pseudo_jsonl(self.path("pseudo"))
        scored = [p for p in pseudos if p.entropy is not None]
        theta = self.config.effective_theta()
        if not scored:
            log.warning("no scoreable pseudo-responses this round; selection is empty")
            selected = Dataset((), provenance="selected")
            report = selection.SelectionReport(
                tau=float("inf"), theta=theta, kept_ids=[], dropped_ids=[], histogram={}
            )
        else:
            if self.config.tau_source == "labeled":
                labeled = self._load_dataset("labeled", "labeled")
                tau = self._labeled_tau(labeled, self._model("warm"))
            else:
                tau = selection.percentile_threshold([p.entropy for p in scored], theta)
            selected, report = selection.select(scored, tau, unlabeled, theta=theta)
        if len(selected) == 0:
            log.warning(
                "selection kept no pseudo-responses (tau below the entropy floor?); "
                "the final fine-tune will degenerate to labeled-only SFT"
            )
        dump_jsonl(selected, self.path("selected"))
        report_obj = report.to_obj()
        report_obj["tau"] = None if report_obj["tau"] == float("inf") else report_obj["tau"]
        (self.path("selection_report")).write_text(
            json.dumps(report_obj, indent=2), encoding="utf-8"
        )
        self.state.advance("selected")
        self._save()

    def _stage_evolve(self) -> None:
        labeled = self._load_dataset("labeled", "labeled")
        selected = self._load_dataset("selected", "labeled")
        train = merge(labeled, selected) if len(selected) else labeled
        payload = self.workdir / "payloads" / f"evolve-round-{self.state.round:02d}.jsonl"
        build_finetune_payload(train, payload, self.templates)
        evolved = self._run_finetune(self.base_model, payload, "evolved", train.ids())
        self.state.models["evolved"] = evolved.name
        self.state.advance("evolved")
        self._save()

    def _stage_evaluate(self) -> None:
        test = self._load_dataset("test", "test")
        reports = {}
        for key, role in (("base", "base"), ("warm", "warm"), ("evol", "evolved")):
            model = self._model(role)
            reports[key] = evaluate(
                model,
                test,
                self.backend,
                numeric_tol=self.config.numeric_tol,
                max_workers=self.config.concurrency,
            ).to_obj()
        report = {"round": self.state.round, "models": reports}
        self.path("eval_report").write_text(json.dumps(report, indent=2), encoding="utf-8")

        selection_report = json.loads(self.path("selection_report").read_text(encoding="utf-8"))
        unlabeled = self._load_dataset("unlabeled")
        self.state.history.append(
            {
                "round": self.state.round,
                "accuracy": {k: reports[k]["accuracy"] for k in reports},
                "mean_entropy": {k: reports[k]["mean_entropy"] for k in reports},
                "selected": len(selection_report["kept_ids"]),
                "scored": len(selection_report["kept_ids"]) + len(selection_report["dropped_ids"]),
                "tau": selection_report["tau"],
                "theta": selection_report["theta"],
                "unlabeled_pool": len(unlabeled),
                "labeled_pool": len(self._load_dataset("labeled")),
                "models": dict(self.state.models),
            }
        )
        self.state.advance("evaluated")
        self._save()

    # -- drivers -----------------------------------------------------------------

    _STAGE_FUNCS = {
        "warmed": _stage_warmup,
        "indexed": _stage_index,
        "inferred": _stage_infer,
        "justified": _stage_justify,
        "scored": _stage_score,
        "selected": _stage_select,
        "evolved": _stage_evolve,
        "evaluated": _stage_evaluate,
    }

    def run_until(self, target: str) -> PipelineState:
        """Advance the current round to ``target``, resuming mid-round state."""
        if target not in STAGE_ORDER:
            raise ValidationError(f"unknown stage {target!r}")
        with WorkdirLock(self.workdir):
            while STAGE_ORDER[self.state.stage] < STAGE_ORDER[target]:
                next_stage = STAGES[STAGE_ORDER[self.state.stage] + 1]
                log.info("round %d: running stage -> %s", self.state.round, next_stage)
                self._STAGE_FUNCS[next_stage](self)
        return self.state

    def run_round(self) -> PipelineState:
        """Run the current round through evaluation (resumes if mid-round)."""
        return self.run_until("evaluated")

    def _roll_round(self) -> None:
        """Fold selected records into the labeled pool and start a new round."""
        labeled = self._load_dataset("labeled", "labeled")
        selected = self._load_dataset("selected", "labeled")
        unlabeled = self._load_dataset("unlabeled", "unlabeled")

        archive = self.workdir / "rounds" / f"round-{self.state.round:02d}"
        archive.mkdir(parents=True, exist_ok=True)
        for name in ("labeled", "unlabeled", "pseudo", "selected", "selection_report", "eval_report"):
            src = self.path(name)
            if src.exists():
                shutil.copy2(src, archive / src.name)

        selected_ids = set(selected.ids())
        new_labeled = merge(labeled, selected) if len(selected) else labeled
        remaining = Dataset(
            tuple(r for r in unlabeled.records if r.id not in selected_ids),
            provenance=f"{unlabeled.provenance}-round{self.state.round}",
        )
        dump_jsonl(new_labeled, self.path("labeled"))
        dump_jsonl(remaining, self.path("unlabeled"))

        self.state = PipelineState(
            round=self.state.round + 1,
            stage="init",
            models={"base": self.base_model.name, "warm": None, "evolved": None},
            config=self.config.snapshot_obj(),
            timestamps={"init": datetime.now(timezone.utc).isoformat()},
            history=self.state.history,
        )
        self._save()

    def iterate(self, rounds: int) -> PipelineState:
        """Run up to ``rounds`` evolution rounds with pool roll-over.

        Stops early when the unlabeled pool empties or when selection comes
        back empty twice in a row.
        """
        if rounds < 1:
            raise ValidationError("rounds must be >= 1")
        completed = len(self.state.history)
        while completed < rounds:
            if self.state.stage == "evaluated":
                self._roll_round()
            unlabeled = self._load_dataset("unlabeled")
            if len(unlabeled) == 0:
                self.state.stopped = "unlabeled pool exhausted"
                self._save()
                break
            self.run_round()
            completed = len(self.state.history)
            last_two = [h["selected"] for h in self.state.history[-2:]]
            if len(last_two) == 2 and last_two == [0, 0]:
                self.state.stopped = "selection empty in two consecutive rounds"
                self._save()
                break
        return self.state


def audit_test_isolation(workdir: str | Path) -> list[str]:
    """Ids from the test split that leaked into any fine-tune payload or
    journaled training call. Empty means the isolation invariant holds."""
    workdir = Path(workdir)
    test_ids = set(load_jsonl(workdir / FILES["test"]).ids())
    trained_ids: set[str] = set()

    payload_dir = workdir / "payloads"
    if payload_dir.exists():
        for meta_path in sorted(payload_dir.glob("*.meta.json")):
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            trained_ids.update(meta.get("task_ids", []))

    journal = RequestJournal(workdir / FILES["journal"])
    for entry in journal.entries():
        if entry.get("kind") == "finetune":
            trained_ids.update(entry.get("task_ids", []))

    return sorted(test_ids & trained_ids)
