"""
Measurement backends a sweep can drive
"""

import asyncio
import itertools
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from errors import BackendUnavailable, SpecError, SweepError
from meter import TraceKind, load_power_traces
from profiles import ProfileCache
from simulator import SimConfig, simulate
from telemetry import IterationLog, Phase, PreemptionMode, RequestRecord, ServingLog

logger = logging.getLogger(__name__)


@dataclass
class Measurement:
    """What one backend execution hands to accounting"""
    traces: dict
    log: ServingLog
    tdp_w: float | None = None
    num_devices: int = 1
    clock_origin: str | None = None
    flags: tuple = ()
    artifacts: dict = field(default_factory=dict)


class Backend:
    """Base class for backends; one run in flight at a time"""
    kind = "base"

    def __init__(self):
        self._tokens = itertools.count(1)
        self.lease_token = None

    @contextmanager
    def lease(self):
        """Exclusive use of the backend for one run"""
        if self.lease_token is not None:
            raise SweepError(f"{self.kind} backend already running lease {self.lease_token}")
        self.lease_token = next(self._tokens)
        try:
            yield self.lease_token
        finally:
            self.lease_token = None

    def probe(self):
        """Raise BackendUnavailable when the backend cannot be used"""

    def reset(self, config):
        pass

    def execute(self, config, workload) -> Measurement:
        raise NotImplementedError


class SimulatorBackend(Backend):
    """Serves each config on a fresh simulated server"""
    kind = "simulator"

    def __init__(self, seed=0, sampling_interval_s=0.01, trace_kind=TraceKind.ENERGY):
        super().__init__()
        self.seed = seed
        self.sampling_interval_s = sampling_interval_s
        self.trace_kind = trace_kind

    def execute(self, config, workload):
        profile = ProfileCache.get(config.device_profile)
        if config.power_limit_w is not None:
            logger.info("power_limit_w=%s is recorded but not applied by the simulator", config.power_limit_w)
        sim_config = SimConfig(
            max_batch_size=config.max_batch_size,
            tp_degree=config.tp_degree,
            kv_budget_tokens=profile.kv_budget_tokens * config.tp_degree,
            kv_tokens_per_request_token=profile.kv_tokens_per_request_token,
            preemption_mode=PreemptionMode(config.preemption_mode),
            swap_bandwidth=profile.swap_bandwidth,
            sampling_interval_s=self.sampling_interval_s,
            seed=self.seed,
            trace_kind=self.trace_kind,
        )
        result = simulate(sim_config, workload, profile.latency, profile.power)
        return Measurement(
            traces=result.traces,
            log=result.log,
            tdp_w=result.tdp_w,
            num_devices=result.num_devices,
            clock_origin=result.clock_origin,
        )


@dataclass
class ClientRecord:
    """Timestamps one streamed completion produced on the client clock"""
    request_id: str
    input_tokens: int
    submit_t: float
    token_times: list = field(default_factory=list)
    complete_t: float | None = None
    output_tokens: int = 0
    error: str | None = None


def client_timeline(records):
    """Decode iterations inferred from concurrency and stream chunk arrivals

    Between consecutive observed instants the batch size is the number of
    requests submitted and not yet complete, and the tokens emitted are the
    chunks that arrived in that interval.
    """
    records = [r for r in records if r.complete_t is not None and r.error is None]
    if not records:
        return []
    token_times = np.sort(np.array([t for r in records for t in r.token_times], dtype=float))
    submits = np.array([r.submit_t for r in records])
    completes = np.array([r.complete_t for r in records])
    instants = np.unique(np.concatenate((submits, token_times, completes)))
    starts, ends = instants[:-1], instants[1:]
    running = ((submits[None, :] <= starts[:, None]) & (completes[None, :] >= ends[:, None])).sum(axis=1)
    tokens = np.searchsorted(token_times, ends, side="right") - np.searchsorted(token_times, starts, side="right")
    return [
        IterationLog(float(a), float(b), int(size), int(count), Phase.DECODE)
        for a, b, size, count in zip(starts, ends, running, tokens)
        if size > 0
    ]


def _chunk_text(payload):
    choices = payload.get("choices") or []
    if choices:
        choice = choices[0]
        return choice.get("text") or (choice.get("delta") or {}).get("content") or ""
    return payload.get("text") or payload.get("token") or ""


class HttpBackend(Backend):
    """Drives a streaming text-generation endpoint and pairs it with an external power trace

    `power_trace` may contain `{config_id}`; the file must share the client
    clock, Unix seconds unless `clock_origin` says otherwise.
    """
    kind = "http"

    def __init__(self, base_url, power_trace, endpoint="/v1/completions", model_id=None, token=None,
                 timeout_s=300.0, reset_url=None, clock_origin=None, tdp_w=None, num_devices=1,
                 transport=None, clock=time.time):
        super().__init__()
        self.base_url = base_url.rstrip("/")
        self.power_trace = str(power_trace)
        self.endpoint = endpoint
        self.model_id = model_id
        self.token = token
        self.timeout_s = timeout_s
        self.reset_url = reset_url
        self.clock_origin = clock_origin
        self.tdp_w = tdp_w
        self.num_devices = num_devices
        self.transport = transport
        self.clock = clock

    @property
    def headers(self):
        return {"Authorization": f"Bearer {self.token}"} if self.token else {}

    def probe(self):
        try:
            with httpx.Client(transport=self.transport, timeout=10.0) as client:
                client.get(self.base_url, headers=self.headers)
        except httpx.TransportError as err:
            raise BackendUnavailable(f"cannot reach {self.base_url}: {err}") from err

    def reset(self, config):
        if self.reset_url is None:
            return
        try:
            with httpx.Client(transport=self.transport, timeout=self.timeout_s) as client:
                response = client.post(self.reset_url, json=config.to_dict(), headers=self.headers)
                response.raise_for_status()
        except httpx.HTTPError as err:
            raise SweepError(f"server reset failed: {err}") from err

    async def _send(self, client, request):
        body = {
            "prompt": request.prompt if request.prompt is not None else "hello " * request.input_tokens,
            "max_tokens": request.output_tokens,
            "stream": True,
        }
        if self.model_id:
            body["model"] = self.model_id
        record = ClientRecord(request.request_id, request.input_tokens, self.clock())
        usage_tokens = None
        try:
            async with client.stream("POST", self.base_url + self.endpoint, json=body, headers=self.headers) as resp:
                if resp.status_code != 200:
                    await resp.aread()
                    record.error = f"HTTP {resp.status_code}"
                    return record
                async for line in resp.aiter_lines():
                    if not line.startswith("data:"):
                        continue
                    data = line[len("data:"):].strip()
                    if data == "[DONE]":
                        break
                    now = self.clock()
                    try:
                        payload = json.loads(data)
                    except json.JSONDecodeError:
                        continue
                    if _chunk_text(payload):
                        record.token_times.append(now)
                    usage = payload.get("usage") or {}
                    usage_tokens = usage.get("completion_tokens", usage_tokens)
        except httpx.HTTPError as err:
            record.error = f"HTTP error: {err}"
            return record
        record.complete_t = self.clock()
        record.output_tokens = usage_tokens if usage_tokens else len(record.token_times)
        return record

    async def _drive(self, workload):
        async with httpx.AsyncClient(transport=self.transport, timeout=self.timeout_s) as client:
            return await asyncio.gather(*(self._send(client, r) for r in workload.requests))

    def execute(self, config, workload):
        if workload.is_diffusion:
            raise SpecError("the HTTP backend serves text generation only")
        trace_path = Path(self.power_trace.format(config_id=config.config_id))
        if not trace_path.exists():
            raise SweepError(f"power trace {trace_path} not found")

        client_records = asyncio.run(self._drive(workload))
        completed, failed = [], []
        for record in client_records:
            if record.error is None and record.token_times:
                completed.append(record)
            else:
                logger.warning("request %s: %s", record.request_id, record.error or "no tokens streamed")
                failed.append(record)
        log = ServingLog(
            records=[
                RequestRecord(
                    r.request_id, r.submit_t, r.complete_t,
                    input_tokens=r.input_tokens,
                    output_tokens=max(1, r.output_tokens),
                    first_token_t=r.token_times[0],
                )
                for r in completed
            ],
            iterations=client_timeline(completed),
            incomplete=[r.request_id for r in failed],
            incomplete_submit_t={r.request_id: r.submit_t for r in failed},
        )
        traces = load_power_traces([trace_path], self.clock_origin)
        if not traces:
            raise SweepError(f"power trace {trace_path} has no samples")
        tdp_w = self.tdp_w
        if tdp_w is None:
            tdp_w = next(iter(traces.values())).declared_max_power
        return Measurement(
            traces=traces,
            log=log,
            tdp_w=tdp_w,
            num_devices=len(traces),
            clock_origin=self.clock_origin,
            flags=("client-timeline",),
            artifacts={"trace": str(trace_path)},
        )


def make_backend(section, seed=0):
    """Build the backend a sweep spec's [backend] section describes"""
    section = dict(section)
    kind = section.pop("kind", "simulator")
    section.pop("devices", None)
    if kind == "simulator":
        try:
            trace_kind = TraceKind(section.pop("trace_kind", TraceKind.ENERGY.value))
        except ValueError as err:
            raise SpecError(f"unknown trace_kind: {err}") from err
        return SimulatorBackend(seed, float(section.pop("sampling_interval_s", 0.01)), trace_kind)
    if kind == "http":
        token_env = section.pop("token_env", None)
        token = os.environ.get(token_env) if token_env else None
        if "base_url" not in section or "power_trace" not in section:
            raise SpecError("[backend] kind = http needs base_url and power_trace")
        try:
            return HttpBackend(token=token, **section)
        except TypeError as err:
            raise SpecError(f"bad [backend] section: {err}") from err
    raise SpecError(f"unknown backend kind {kind!r}")
