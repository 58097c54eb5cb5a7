import itertools
import json

import httpx
import pytest

from accounting import SteadyParams
from backends import ClientRecord, HttpBackend, SimulatorBackend, client_timeline, make_backend
from conftest import constant_trace
from errors import BackendUnavailable, SpecError, SweepError
from meter import TraceKind, write_power_trace
from simulator import LLMRequest, SimWorkload, diffusion_workload
from sweep import BenchmarkConfig, Task, measure_config, run_sweep
from telemetry import IterationLog, Phase

CHUNKS = [
    {"choices": [{"text": "a"}]},
    {"choices": [{"text": "b"}]},
    {"choices": [{"text": "c"}]},
    {"choices": [{"text": ""}], "usage": {"completion_tokens": 3}},
]


def stream_body():
    lines = [f"data: {json.dumps(chunk)}\n\n" for chunk in CHUNKS] + ["data: [DONE]\n\n"]
    return "".join(lines).encode()


class FakeServer:
    """Streaming completions endpoint that remembers what it was sent"""
    def __init__(self):
        self.requests = []

    def __call__(self, request):
        self.requests.append(request)
        if request.method == "GET":
            return httpx.Response(200, text="ok")
        if request.url.path == "/reset":
            return httpx.Response(204)
        body = json.loads(request.content)
        if body["prompt"] == "fail":
            return httpx.Response(500, text="overloaded")
        return httpx.Response(200, content=stream_body(), headers={"content-type": "text/event-stream"})


def http_backend(tmp_path, server=None, **kwargs):
    trace_dir = tmp_path / "traces"
    trace_dir.mkdir(exist_ok=True)
    ticks = itertools.count(1.0, 0.001)
    return HttpBackend(
        "http://bench.test",
        str(trace_dir / "{config_id}.jsonl"),
        clock_origin="bench-host",
        transport=httpx.MockTransport(server or FakeServer()),
        clock=lambda: next(ticks),
        **kwargs,
    )


def write_trace_for(tmp_path, config):
    write_power_trace(tmp_path / "traces" / f"{config.config_id}.jsonl",
                      [constant_trace(300.0, t0=0.0, t1=20.0, device="gpu0")],
                      clock_origin="bench-host", tdp_w=700.0)


def prompts(*texts):
    return SimWorkload(tuple(LLMRequest(f"q{k}", 4, 3, prompt=t) for k, t in enumerate(texts)))


def test_lease_is_exclusive():
    backend = SimulatorBackend()
    with backend.lease() as token:
        assert token == 1
        with pytest.raises(SweepError):
            with backend.lease():
                pass
    with backend.lease() as token:
        assert token == 2


def test_client_timeline():
    records = [
        ClientRecord("a", 4, 0.0, [1.0, 2.0], 3.0, 2),
        ClientRecord("b", 4, 1.0, [2.5], 4.0, 1),
        ClientRecord("c", 4, 0.5, [], None, 0, "HTTP 500"),
    ]
    assert client_timeline(records) == [
        IterationLog(0.0, 1.0, 1, 1, Phase.DECODE),
        IterationLog(1.0, 2.0, 2, 1, Phase.DECODE),
        IterationLog(2.0, 2.5, 2, 1, Phase.DECODE),
        IterationLog(2.5, 3.0, 2, 0, Phase.DECODE),
        IterationLog(3.0, 4.0, 1, 0, Phase.DECODE),
    ]
    assert client_timeline([]) == []


def test_client_timeline_skips_idle_gaps():
    records = [ClientRecord("a", 1, 0.0, [0.5], 1.0, 1), ClientRecord("b", 1, 2.0, [2.5], 3.0, 1)]
    iterations = client_timeline(records)
    assert all(it.batch_size == 1 for it in iterations)
    assert (1.0, 2.0) not in [(it.t_start, it.t_end) for it in iterations]


def test_http_execute_builds_log(tmp_path):
    server = FakeServer()
    backend = http_backend(tmp_path, server, model_id="served", token="secret")
    config = BenchmarkConfig(Task.CHAT, max_batch_size=2)
    write_trace_for(tmp_path, config)
    measurement = backend.execute(config, prompts("hello", "world"))

    records = measurement.log.records
    assert [r.request_id for r in records] == ["q0", "q1"]
    assert all(r.output_tokens == 3 for r in records)
    assert all(r.submit_t < r.first_token_t < r.complete_t for r in records)
    assert measurement.flags == ("client-timeline",)
    assert measurement.tdp_w == 700.0
    assert measurement.clock_origin == "bench-host"
    assert sum(it.tokens_emitted for it in measurement.log.iterations) == 6

    posted = [r for r in server.requests if r.method == "POST"]
    assert all(r.headers["authorization"] == "Bearer secret" for r in posted)
    body = json.loads(posted[0].content)
    assert body["model"] == "served"
    assert body["stream"] is True
    assert body["max_tokens"] == 3


def test_http_failed_request_is_incomplete(tmp_path, caplog):
    backend = http_backend(tmp_path)
    config = BenchmarkConfig(Task.CHAT, max_batch_size=2)
    write_trace_for(tmp_path, config)
    measurement = backend.execute(config, prompts("hello", "fail"))
    assert [r.request_id for r in measurement.log.records] == ["q0"]
    assert measurement.log.incomplete == ["q1"]
    assert list(measurement.log.incomplete_submit_t) == ["q1"]
    assert "HTTP 500" in caplog.text


def test_http_missing_trace(tmp_path):
    backend = http_backend(tmp_path)
    with pytest.raises(SweepError):
        backend.execute(BenchmarkConfig(Task.CHAT), prompts("hello"))


def test_http_rejects_diffusion(tmp_path):
    config = BenchmarkConfig(Task.T2I, denoising_steps=10, resolution="512x512")
    with pytest.raises(SpecError):
        http_backend(tmp_path).execute(config, diffusion_workload(1, 10))


def test_http_sweep(tmp_path):
    backend = http_backend(tmp_path)
    present = BenchmarkConfig(Task.CHAT, max_batch_size=1)
    missing = BenchmarkConfig(Task.CHAT, max_batch_size=2)
    write_trace_for(tmp_path, present)
    results = run_sweep([present, missing], backend, prompts("a", "b", "c", "d"),
                        SteadyParams(allow_unsaturated=True))
    assert [r.status for r in results] == ["ok", "failed"]
    assert "client-timeline" in results[0].flags
    assert results[0].artifacts["trace"].endswith(f"{present.config_id}.jsonl")
    assert results[0].avg_power_w == pytest.approx(300.0)


def test_http_sweep_survives_corrupt_trace(tmp_path):
    backend = http_backend(tmp_path)
    corrupt = BenchmarkConfig(Task.CHAT, max_batch_size=2)
    present = BenchmarkConfig(Task.CHAT, max_batch_size=1)
    (tmp_path / "traces" / f"{corrupt.config_id}.jsonl").write_bytes(b'{"device": "g\xff", "t": 0, "power_w": 1}\n')
    write_trace_for(tmp_path, present)
    results = run_sweep([corrupt, present], backend, prompts("a", "b", "c", "d"),
                        SteadyParams(allow_unsaturated=True))
    assert [r.status for r in results] == ["failed", "ok"]
    assert "UTF-8" in results[0].error


def test_probe_unreachable(tmp_path):
    def refuse(request):
        raise httpx.ConnectError("connection refused", request=request)

    backend = http_backend(tmp_path, refuse)
    with pytest.raises(BackendUnavailable):
        backend.probe()
    with pytest.raises(BackendUnavailable):
        run_sweep([BenchmarkConfig(Task.CHAT)], backend, prompts("hello"))


def test_reset_posts_config(tmp_path):
    server = FakeServer()
    backend = http_backend(tmp_path, server, reset_url="http://bench.test/reset")
    config = BenchmarkConfig(Task.CHAT, max_batch_size=8)
    backend.reset(config)
    (request,) = server.requests
    assert json.loads(request.content)["max_batch_size"] == 8


def test_reset_failure(tmp_path):
    backend = http_backend(tmp_path, lambda request: httpx.Response(503), reset_url="http://bench.test/reset")
    with pytest.raises(SweepError):
        backend.reset(BenchmarkConfig(Task.CHAT))


def test_simulator_backend_serves_both_kinds():
    backend = SimulatorBackend(seed=4, trace_kind=TraceKind.POWER)
    llm = backend.execute(BenchmarkConfig(Task.CHAT, max_batch_size=2, tp_degree=2), prompts("x", "y"))
    assert llm.num_devices == 2
    assert llm.clock_origin == "sim:4"
    assert all(t.kind is TraceKind.POWER for t in llm.traces.values())
    config = BenchmarkConfig(Task.T2I, max_batch_size=2, denoising_steps=5, resolution="512x512")
    images = backend.execute(config, diffusion_workload(3, 5))
    assert [b.size for b in images.log.batches] == [2, 1]


def test_simulator_backend_unknown_profile():
    with pytest.raises(SpecError):
        SimulatorBackend().execute(BenchmarkConfig(Task.CHAT, device_profile="tpu-v9"), prompts("x"))


def test_make_backend(monkeypatch):
    backend = make_backend({"kind": "simulator", "sampling_interval_s": 0.005, "devices": 4}, seed=2)
    assert isinstance(backend, SimulatorBackend)
    assert backend.sampling_interval_s == 0.005
    assert backend.seed == 2

    monkeypatch.setenv("BENCH_TOKEN", "t0k")
    backend = make_backend({"kind": "http", "base_url": "http://x", "power_trace": "p.jsonl", "token_env": "BENCH_TOKEN"})
    assert backend.headers == {"Authorization": "Bearer t0k"}


@pytest.mark.parametrize("section", [
    {"kind": "gpu-farm"},
    {"kind": "http", "base_url": "http://x"},
    {"kind": "http", "base_url": "http://x", "power_trace": "p.jsonl", "colour": "red"},
    {"kind": "simulator", "trace_kind": "volts"},
])
def test_make_backend_rejects(section):
    with pytest.raises(SpecError):
        make_backend(section)


def test_measure_config_over_http(tmp_path):
    backend = http_backend(tmp_path)
    config = BenchmarkConfig(Task.CHAT, max_batch_size=1)
    write_trace_for(tmp_path, config)
    result = measure_config(config, backend, prompts("a", "b", "c"), SteadyParams(allow_unsaturated=True))
    assert result.ok
    assert result.num_requests == 3
    assert result.tdp_ratio == pytest.approx(700.0 / 300.0)
