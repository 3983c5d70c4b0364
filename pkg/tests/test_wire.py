"""Wire-layer integration: the HTTP client against the live mock provider."""
from __future__ import annotations

import socket
import threading
import time

import pytest
import uvicorn

from semievol_forge.backends.http import HttpBackend, wait_for_job
from semievol_forge.backends.types import ChatRequest, EmbeddingRequest, ModelRef, RetryPolicy
from semievol_forge.errors import ProviderError
from semievol_forge.pipeline import Pipeline, PipelineConfig, build_finetune_payload
from semievol_forge.prompting import render_task
from semievol_forge.simlab.backend import SIM_BASE_MODEL, SimulatedBackend
from semievol_forge.simlab.harness import prepare_workdir
from semievol_forge.simlab.server import create_app
from semievol_forge.simlab.world import OracleSpec, SyntheticWorld

BASE = ModelRef(name=SIM_BASE_MODEL, role="base")


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def world():
    return SyntheticWorld(clusters=3, per_cluster=12, seed=21, oracle=OracleSpec(seed=21))


@pytest.fixture(scope="module")
def server(world):
    port = free_port()
    config = uvicorn.Config(
        create_app(world), host="127.0.0.1", port=port, log_level="error", lifespan="off"
    )
    instance = uvicorn.Server(config)
    thread = threading.Thread(target=instance.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not instance.started:
        if time.time() > deadline:
            raise RuntimeError("mock server did not start")
        time.sleep(0.02)
    yield f"http://127.0.0.1:{port}"
    instance.should_exit = True
    thread.join(timeout=5)


@pytest.fixture
def client(server):
    return HttpBackend(server, retry=RetryPolicy(attempts=2, base_delay=0.01), timeout=10)


class TestChatOverWire:
    def test_matches_in_process_backend(self, world, client):
        record = world.tasks.records[0]
        req = ChatRequest(
            model=BASE,
            messages=tuple(render_task(record)),
            temperature=1.0,
            want_logprobs=True,
        )
        direct = SimulatedBackend(world).chat(req)
        over_wire = client.chat(req)
        assert over_wire.text == direct.text
        assert [t for t, _ in over_wire.token_logprobs] == [t for t, _ in direct.token_logprobs]
        assert [lp for _, lp in over_wire.token_logprobs] == pytest.approx(
            [lp for _, lp in direct.token_logprobs]
        )

    def test_logprob_shape(self, world, client):
        record = world.tasks.records[1]
        resp = client.chat(
            ChatRequest(
                model=BASE,
                messages=tuple(render_task(record)),
                temperature=0.0,
                want_logprobs=True,
            )
        )
        assert len(resp.token_logprobs) == len(resp.text.split())

    def test_provider_error_payload_surfaces(self, client):
        with pytest.raises(ProviderError) as err:
            client.chat(
                ChatRequest(model=BASE, messages=({"role": "user", "content": "garbage"},))
            )
        assert "400" in str(err.value)


class TestEmbeddingsOverWire:
    def test_order_and_dimension(self, world, client):
        texts = tuple(r.question for r in world.tasks.records[:4])
        over_wire = client.embed(EmbeddingRequest(texts=texts))
        direct = SimulatedBackend(world).embed(EmbeddingRequest(texts=texts))
        assert len(over_wire) == 4
        for a, b in zip(over_wire, direct):
            assert a == pytest.approx(b)


class TestFineTuneOverWire:
    def test_job_lifecycle(self, world, client, tmp_path):
        from semievol_forge.data import Dataset

        payload = tmp_path / "train.jsonl"
        build_finetune_payload(
            Dataset(world.tasks.records[:6], provenance="w"), payload
        )
        job = client.start_finetune(BASE, payload, epochs=2, result_role="warm")
        assert job.status == "queued"
        done = wait_for_job(client, job, poll_interval=0.01)
        assert done.status == "succeeded"
        assert done.result.name.startswith("sim-ft-")
        assert done.result.role == "warm"
        # the tuned model is immediately usable for chat over the wire
        record = world.tasks.records[0]
        resp = client.chat(
            ChatRequest(
                model=ModelRef(name=done.result.name, role="warm"),
                messages=tuple(render_task(record)),
                temperature=0.0,
            )
        )
        assert "Answer:" in resp.text


class TestPipelineOverHttp:
    def test_full_round_in_http_mode(self, world, server, tmp_path):
        workdir = tmp_path / "http-run"
        prepare_workdir(workdir, world, split_seed=13)
        backend = HttpBackend(server, retry=RetryPolicy(attempts=2, base_delay=0.01), timeout=30)
        config = PipelineConfig(seed=13, concurrency=4, finetune_poll_interval=0.01)
        pipe = Pipeline(workdir, backend, BASE, config)
        state = pipe.run_round()
        assert state.stage == "evaluated"
        entry = state.history[-1]
        assert entry["selected"] >= 1
        # without echo-scoring the confidence source is generation logprobs
        from semievol_forge.collab import load_pseudo_jsonl

        pseudos = load_pseudo_jsonl(workdir / "pseudo.jsonl")
        scored = [p for p in pseudos if p.entropy is not None]
        assert scored
        assert all(p.entropy_source == "generation_logprobs" for p in scored)
