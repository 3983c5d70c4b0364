"""Convenience wiring of a synthetic world into a pipeline working directory.

Used by the CLI's simulated mode and by the verification suite: generate the
world, split it, and drive a pipeline whose backend is the deterministic
simulator.
"""
from __future__ import annotations

from pathlib import Path

from ..backends.types import ModelRef
from ..data import dump_jsonl, split
from ..pipeline import FILES, Pipeline, PipelineConfig
from .backend import SIM_BASE_MODEL, SimulatedBackend
from .world import SyntheticWorld


def prepare_workdir(
    workdir: str | Path,
    world: SyntheticWorld,
    split_seed: int,
    ratio: tuple[float, float, float] = (2, 6, 2),
) -> None:
    """Split the world's tasks into the working directory (idempotent)."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if (workdir / FILES["labeled"]).exists():
        return
    result = split(world.tasks, ratio, split_seed)
    dump_jsonl(result.labeled, workdir / FILES["labeled"])
    dump_jsonl(result.unlabeled, workdir / FILES["unlabeled"])
    dump_jsonl(result.sealed, workdir / FILES["sealed"])
    dump_jsonl(result.test, workdir / FILES["test"])


def simulated_pipeline(
    workdir: str | Path,
    world: SyntheticWorld,
    config: PipelineConfig,
    ratio: tuple[float, float, float] = (2, 6, 2),
) -> Pipeline:
    """A pipeline over ``workdir`` backed by the world's simulator."""
    workdir = Path(workdir)
    prepare_workdir(workdir, world, config.seed, ratio)
    backend = SimulatedBackend(world, state_path=workdir / "sim_models.json")
    base = ModelRef(name=SIM_BASE_MODEL, role="base", backend=backend.name)
    return Pipeline(workdir, backend, base, config)
