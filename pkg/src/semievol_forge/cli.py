"""Command-line surface.

Configuration comes from a TOML file plus flag overrides (flags win). Every
run echoes its fully-resolved configuration into the working directory.
Exit codes: 0 success, 1 validation error, 2 backend or IO failure; pass
``--json`` for machine-readable error objects on stdout. Logs go to stderr,
artifacts to the working directory.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .backends.command import CommandFineTuner
from .backends.http import HttpBackend
from .backends.types import ModelRef
from .data import dump_jsonl, load_jsonl, split
from .errors import SemiEvolError, ValidationError
from .pipeline import FILES, STAGE_ORDER, STAGES, Pipeline, PipelineConfig, audit_test_isolation
from .simlab.backend import SIM_BASE_MODEL, SimulatedBackend
from .simlab.world import OracleSpec, SyntheticWorld, gen_tasks

def _default_config() -> dict:
    return {
        "run": {
            "workdir": None,
            "seed": 0,
            "n": 4,
            "k": 3,
            "theta": 50.0,
            "epochs": 2,
            "rounds": 1,
            "tau_source": "unlabeled",
            "numeric_tol": 0.01,
            "concurrency": 8,
            "collab_temperature": 1.0,
            "templates_dir": "",
        },
        "backend": {
            "mode": "simulated",
            "base_url": "",
            "api_key_env": "OPENAI_API_KEY",
            "base_model": "",
            "embed_model": "text-embedding-3-small",
        },
        "finetune": {
            "mode": "backend",
            "command": "",
            "poll_interval": 1.0,
        },
        "simulated": {
            "clusters": 10,
            "per_cluster": 50,
            "world_seed": 1,
            "oracle": {},
        },
    }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(config_path: str | None, overrides: dict, need_workdir: bool = True) -> dict:
    cfg = _default_config()
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ValidationError(f"config file does not exist: {path}")
        with path.open("rb") as f:
            cfg = _merge(cfg, tomllib.load(f))
    run_overrides = {k: v for k, v in overrides.items() if v is not None}
    cfg["run"] = _merge(cfg["run"], run_overrides)
    if need_workdir and not cfg["run"]["workdir"]:
        raise ValidationError("a working directory is required (--workdir or [run].workdir)")
    return cfg


def echo_config(cfg: dict) -> None:
    workdir = Path(cfg["run"]["workdir"])
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "config_resolved.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True), encoding="utf-8"
    )


def build_world(cfg: dict) -> SyntheticWorld:
    sim = cfg["simulated"]
    oracle = OracleSpec.from_obj({"seed": sim.get("world_seed", 1), **sim.get("oracle", {})})
    return SyntheticWorld(
        clusters=sim.get("clusters", 10),
        per_cluster=sim.get("per_cluster", 50),
        seed=sim.get("world_seed", 1),
        oracle=oracle,
    )


def pipeline_config(cfg: dict, ablate: tuple[str, ...]) -> PipelineConfig:
    run = cfg["run"]
    n = int(run["n"])
    if "collab" in ablate:
        n = 1
    elif n < 2:
        raise ValidationError("n must be >= 2 (use --ablate collab for the single-model variant)")
    return PipelineConfig(
        n=n,
        k=int(run["k"]),
        theta=float(run["theta"]),
        epochs=int(run["epochs"]),
        seed=int(run["seed"]),
        tau_source=run["tau_source"],
        numeric_tol=float(run["numeric_tol"]),
        concurrency=int(run["concurrency"]),
        collab_temperature=float(run["collab_temperature"]),
        finetune_poll_interval=float(cfg["finetune"].get("poll_interval", 1.0)),
        ablate_icl="icl" in ablate,
        ablate_selection="selection" in ablate,
    )


def make_pipeline(cfg: dict, ablate: tuple[str, ...] = ()) -> Pipeline:
    workdir = Path(cfg["run"]["workdir"])
    mode = cfg["backend"]["mode"]
    if mode == "simulated":
        world = build_world(cfg)
        backend = SimulatedBackend(world, state_path=workdir / "sim_models.json")
        base_name = cfg["backend"]["base_model"] or SIM_BASE_MODEL
    elif mode == "http":
        if not cfg["backend"]["base_url"]:
            raise ValidationError("http backend mode needs [backend].base_url")
        if not cfg["backend"]["base_model"]:
            raise ValidationError("http backend mode needs [backend].base_model")
        backend = HttpBackend(
            base_url=cfg["backend"]["base_url"],
            api_key_env=cfg["backend"]["api_key_env"],
            embed_model=cfg["backend"]["embed_model"],
        )
        base_name = cfg["backend"]["base_model"]
    else:
        raise ValidationError(f"unknown backend mode {mode!r}")

    finetuner = None
    if cfg["finetune"]["mode"] == "command":
        if not cfg["finetune"]["command"]:
            raise ValidationError("command fine-tune mode needs [finetune].command")
        finetuner = CommandFineTuner(cfg["finetune"]["command"], workdir / "models")
    elif cfg["finetune"]["mode"] != "backend":
        raise ValidationError(f"unknown fine-tune mode {cfg['finetune']['mode']!r}")

    templates = None
    if cfg["run"].get("templates_dir"):
        from .prompting import TemplateSet

        templates = TemplateSet.load(cfg["run"]["templates_dir"])

    base = ModelRef(name=base_name, role="base", backend=backend.name)
    return Pipeline(
        workdir, backend, base, pipeline_config(cfg, ablate),
        finetuner=finetuner, templates=templates,
    )


def _guard(ctx: click.Context):
    """Map domain errors to the exit-code contract."""

    class Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is None or not isinstance(exc, (SemiEvolError, OSError)):
                return False
            code = 1 if isinstance(exc, ValidationError) else 2
            if ctx.obj.get("json_errors"):
                click.echo(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}))
            else:
                click.echo(f"error: {exc}", err=True)
            sys.exit(code)

    return Guard()


def _common_options(fn):
    options = [
        click.option("--workdir", type=click.Path(), default=None, help="working directory"),
        click.option("--seed", type=int, default=None),
        click.option("--n", type=int, default=None, help="collaborator count"),
        click.option("--k", type=int, default=None, help="retrieved references"),
        click.option("--theta", type=float, default=None, help="selection percentile"),
        click.option("--epochs", type=int, default=None),
        click.option("--tau-source", type=click.Choice(["unlabeled", "labeled"]), default=None),
        click.option("--numeric-tol", type=float, default=None),
        click.option("--concurrency", type=int, default=None),
        click.option("--templates-dir", type=click.Path(), default=None,
                     help="directory of prompt template overrides"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="TOML config file")
@click.option("--json", "json_errors", is_flag=True, help="machine-readable errors on stdout")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, json_errors, verbose):
    """Semi-supervised fine-tuning orchestrator."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = {"config_path": config_path, "json_errors": json_errors}


def _resolve(ctx, **overrides) -> dict:
    return load_config(ctx.obj["config_path"], overrides)


@main.command("split")
@click.option("--input", "input_path", type=click.Path(), required=True, help="source JSONL")
@click.option("--ratio", default="2:6:2", help="labeled:unlabeled:test weights")
@_common_options
@click.pass_context
def cmd_split(ctx, input_path, ratio, **overrides):
    """Partition a dataset into labeled/unlabeled/test pools."""
    with _guard(ctx):
        cfg = _resolve(ctx, **overrides)
        workdir = Path(cfg["run"]["workdir"])
        if (workdir / FILES["state"]).exists():
            raise ValidationError(f"{workdir} already holds a run; pick a fresh working directory")
        try:
            weights = tuple(float(w) for w in ratio.split(":"))
        except ValueError:
            raise ValidationError(f"ratio must look like 2:6:2, got {ratio!r}") from None
        if len(weights) != 3:
            raise ValidationError(f"ratio needs three weights, got {ratio!r}")
        dataset = load_jsonl(input_path)
        result = split(dataset, weights, int(cfg["run"]["seed"]))
        workdir.mkdir(parents=True, exist_ok=True)
        dump_jsonl(result.labeled, workdir / FILES["labeled"])
        dump_jsonl(result.unlabeled, workdir / FILES["unlabeled"])
        dump_jsonl(result.sealed, workdir / FILES["sealed"])
        dump_jsonl(result.test, workdir / FILES["test"])
        echo_config(cfg)
        click.echo(
            f"split {len(dataset)} records -> labeled={len(result.labeled)} "
            f"unlabeled={len(result.unlabeled)} test={len(result.test)}"
        )


def _stage_command(ctx, target: str, overrides: dict, ablate: tuple[str, ...] = ()) -> None:
    with _guard(ctx):
        cfg = _resolve(ctx, **overrides)
        echo_config(cfg)
        pipeline = make_pipeline(cfg, ablate)
        state = pipeline.run_until(target)
        click.echo(f"round {state.round}: stage={state.stage}")


@main.command("warmup")
@_common_options
@click.pass_context
def cmd_warmup(ctx, **overrides):
    """Warm-up fine-tune on the labeled pool."""
    _stage_command(ctx, "warmed", overrides)


@main.command("infer")
@_common_options
@click.pass_context
def cmd_infer(ctx, **overrides):
    """Collaborative inference plus arbitration over the unlabeled pool."""
    _stage_command(ctx, "justified", overrides)


@main.command("select")
@_common_options
@click.pass_context
def cmd_select(ctx, **overrides):
    """Score pseudo-responses and keep the confident ones."""
    _stage_command(ctx, "selected", overrides)


@main.command("finetune")
@_common_options
@click.pass_context
def cmd_finetune(ctx, **overrides):
    """Final fine-tune of the base model on labeled plus selected data."""
    _stage_command(ctx, "evolved", overrides)


@main.command("eval")
@_common_options
@click.pass_context
def cmd_eval(ctx, **overrides):
    """Evaluate base, warm, and evolved models on the test split."""
    _stage_command(ctx, "evaluated", overrides)


def _print_plan(pipeline: Pipeline) -> None:
    current = STAGE_ORDER[pipeline.state.stage]
    plan = [s for s in STAGES if STAGE_ORDER[s] > current]
    click.echo(f"round {pipeline.state.round}, at stage {pipeline.state.stage!r}; plan:")
    for stage in plan:
        click.echo(f"  -> {stage}")


@main.command("evolve")
@click.option("--dry-run", is_flag=True, help="print the stage plan without any calls")
@click.option("--ablate", multiple=True, type=click.Choice(["icl", "collab", "selection"]))
@_common_options
@click.pass_context
def cmd_evolve(ctx, dry_run, ablate, **overrides):
    """Run one full evolution round."""
    with _guard(ctx):
        cfg = _resolve(ctx, **overrides)
        echo_config(cfg)
        pipeline = make_pipeline(cfg, tuple(ablate))
        if dry_run:
            _print_plan(pipeline)
            return
        state = pipeline.run_round()
        last = state.history[-1]
        click.echo(
            f"round {last['round']} done: accuracy base={last['accuracy']['base']:.3f} "
            f"warm={last['accuracy']['warm']:.3f} evol={last['accuracy']['evol']:.3f} "
            f"selected={last['selected']}"
        )


@main.command("iterate")
@click.option("--rounds", type=int, default=None, help="number of evolution rounds")
@click.option("--dry-run", is_flag=True)
@click.option("--ablate", multiple=True, type=click.Choice(["icl", "collab", "selection"]))
@_common_options
@click.pass_context
def cmd_iterate(ctx, rounds, dry_run, ablate, **overrides):
    """Run multiple evolution rounds with pool roll-over."""
    with _guard(ctx):
        cfg = _resolve(ctx, **overrides)
        total = rounds if rounds is not None else int(cfg["run"]["rounds"])
        cfg["run"]["rounds"] = total
        echo_config(cfg)
        pipeline = make_pipeline(cfg, tuple(ablate))
        if dry_run:
            click.echo(f"would run {total} rounds (completed: {len(pipeline.state.history)})")
            _print_plan(pipeline)
            return
        state = pipeline.iterate(total)
        for entry in state.history:
            click.echo(
                f"round {entry['round']}: evol accuracy {entry['accuracy']['evol']:.3f}, "
                f"selected {entry['selected']}, unlabeled pool {entry['unlabeled_pool']}"
            )
        if state.stopped:
            click.echo(f"stopped early: {state.stopped}")


@main.command("audit")
@_common_options
@click.pass_context
def cmd_audit(ctx, **overrides):
    """Check that no test id leaked into any fine-tune payload."""
    with _guard(ctx):
        cfg = _resolve(ctx, **overrides)
        leaks = audit_test_isolation(cfg["run"]["workdir"])
        if leaks:
            click.echo(f"LEAK: {len(leaks)} test ids in training payloads: {leaks[:10]}")
            sys.exit(1)
        click.echo("test isolation holds: no test ids in any training payload")


@main.command("simlab")
@click.option("--out", "out_path", type=click.Path(), default=None, help="write tasks JSONL here")
@click.option("--serve", is_flag=True, help="serve the world over OpenAI-compatible HTTP")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8970)
@click.option("--clusters", type=int, default=None)
@click.option("--per-cluster", type=int, default=None)
@click.option("--world-seed", type=int, default=None)
@click.option("--miscalibrated", is_flag=True, help="invert the confidence bands")
@click.pass_context
def cmd_simlab(ctx, out_path, serve, host, port, clusters, per_cluster, world_seed, miscalibrated):
    """Generate a synthetic world; optionally serve it as a mock provider."""
    with _guard(ctx):
        cfg = load_config(ctx.obj["config_path"], {}, need_workdir=False)
        sim = cfg["simulated"]
        if clusters is not None:
            sim["clusters"] = clusters
        if per_cluster is not None:
            sim["per_cluster"] = per_cluster
        if world_seed is not None:
            sim["world_seed"] = world_seed
        if miscalibrated:
            sim.setdefault("oracle", {})["miscalibrated"] = True
        world = build_world(cfg)
        if out_path:
            dump_jsonl(world.tasks, out_path)
            click.echo(f"wrote {len(world.tasks)} tasks to {out_path}")
        if serve:
            from .simlab.server import create_app, serve as serve_app

            click.echo(f"serving simulated world on http://{host}:{port}", err=True)
            serve_app(create_app(world), host=host, port=port)
        elif not out_path:
            tasks = gen_tasks(sim["clusters"], sim["per_cluster"], sim["world_seed"])
            click.echo(f"world: {len(tasks)} tasks across {sim['clusters']} clusters")


if __name__ == "__main__":
    main()
