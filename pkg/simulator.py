"""
Discrete-event simulator of batched LLM and diffusion serving

The server loop advances a single clock event by event: admission, prefill,
decode (or encode, denoise steps and image decode for diffusion). Every event
has a duration from the latency model and a per-device power from the power
model, which makes the emitted power traces and the energy ledger exact.
"""

import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from errors import InfeasibleConfig, InvalidDistributionParams, MalformedRecord, NonTerminating, SimulationError
from meter import PowerTrace, TraceKind, numbered_lines
from telemetry import (
    BatchGroup,
    IterationLog,
    Phase,
    PreemptionEvent,
    PreemptionMode,
    RequestRecord,
    ServingLog,
)

logger = logging.getLogger(__name__)

REFERENCE_PIXELS = 512 * 512


@dataclass(frozen=True)
class LatencyModel:
    """Parametric per-event durations in seconds

    Decode splits only the per-sequence cost across tensor-parallel
    devices and prefill does not shard at all. `shard_base` also splits
    the fixed per-iteration costs and the prefill work across devices.
    """
    prefill_base_s: float = 0.0
    prefill_per_token_s: float = 0.0
    decode_base_s: float = 0.005
    decode_per_seq_s: float = 0.0005
    comm_s: float = 0.0
    step_base_s: float = 0.0
    step_per_image_s: float = 0.0
    encode_s: float = 0.0
    decode_image_s: float = 0.0
    shard_base: bool = False

    def __post_init__(self):
        for name, value in vars(self).items():
            if name != "shard_base" and not (value >= 0 and math.isfinite(value)):
                raise SimulationError(f"latency coefficient {name} must be finite and >= 0, got {value}")

    def prefill_time(self, tokens, tp_degree=1):
        if self.shard_base:
            comm = self.comm_s * (tp_degree - 1)
            return (self.prefill_base_s + self.prefill_per_token_s * tokens) / tp_degree + comm
        return self.prefill_base_s + self.prefill_per_token_s * tokens

    def decode_time(self, batch_size, tp_degree=1):
        comm = self.comm_s * (tp_degree - 1)
        if self.shard_base:
            return (self.decode_base_s + self.decode_per_seq_s * batch_size) / tp_degree + comm
        return self.decode_base_s + self.decode_per_seq_s / tp_degree * batch_size + comm

    def step_time(self, batch_size, pixel_factor=1.0):
        return self.step_base_s + self.step_per_image_s * batch_size * pixel_factor


@dataclass(frozen=True)
class PowerModel:
    """Per-device power draw of each event kind, in watts"""
    p_idle: float
    p_max: float
    kappa: float = 1.0
    b_ref: float = 1.0
    rho_prefill: float = 1.0
    rho_denoise: float = 1.0
    image_decode_fraction: float = 0.6

    def __post_init__(self):
        if not 0 <= self.p_idle < self.p_max:
            raise SimulationError(f"need 0 <= p_idle < p_max, got {self.p_idle} and {self.p_max}")
        if self.kappa <= 0 or self.b_ref <= 0:
            raise SimulationError("kappa and b_ref must be positive")
        for name in ("rho_prefill", "rho_denoise", "image_decode_fraction"):
            if not 0 < getattr(self, name) <= 1:
                raise SimulationError(f"{name} must lie in (0, 1]")

    def decode_power(self, batch_size):
        load = (batch_size / self.b_ref) ** self.kappa
        return min(self.p_max, self.p_idle + (self.p_max - self.p_idle) * load)

    def prefill_power(self):
        return self.p_max * self.rho_prefill

    def denoise_power(self):
        return self.p_max * self.rho_denoise

    def encode_power(self):
        return self.p_max * self.rho_prefill

    def image_decode_power(self):
        return self.p_max * self.image_decode_fraction

    def swap_power(self):
        return self.p_idle


@dataclass(frozen=True)
class SimConfig:
    max_batch_size: int
    tp_degree: int = 1
    kv_budget_tokens: float = math.inf
    kv_tokens_per_request_token: float = 1.0
    preemption_mode: PreemptionMode = PreemptionMode.RECOMPUTE
    swap_bandwidth: float = 100_000.0
    sampling_interval_s: float = 0.01
    seed: int = 0
    trace_kind: TraceKind = TraceKind.ENERGY
    max_iterations: int = 5_000_000

    def __post_init__(self):
        if self.max_batch_size < 1 or self.tp_degree < 1:
            raise InfeasibleConfig("max_batch_size and tp_degree must be >= 1")
        if self.kv_tokens_per_request_token <= 0 or self.swap_bandwidth <= 0:
            raise InfeasibleConfig("KV factor and swap bandwidth must be positive")
        if self.sampling_interval_s <= 0:
            raise InfeasibleConfig("sampling interval must be positive")

    @property
    def num_devices(self):
        return self.tp_degree


@dataclass(frozen=True)
class LLMRequest:
    request_id: str
    input_tokens: int
    output_tokens: int
    prompt: str | None = None


@dataclass(frozen=True)
class DiffusionRequest:
    request_id: str
    steps: int
    resolution: str = "512x512"


@dataclass(frozen=True)
class SimWorkload:
    """Requests all submitted at t = 0"""
    requests: tuple

    def __post_init__(self):
        object.__setattr__(self, "requests", tuple(self.requests))
        for request in self.requests:
            counts = (
                (request.steps,) if isinstance(request, DiffusionRequest)
                else (request.input_tokens, request.output_tokens)
            )
            if any(c < 1 for c in counts):
                raise SimulationError(f"request {request.request_id}: token and step counts must be >= 1")

    @property
    def is_diffusion(self):
        return bool(self.requests) and isinstance(self.requests[0], DiffusionRequest)

    def __len__(self):
        return len(self.requests)


@dataclass(frozen=True)
class WorkloadSpec:
    n_requests: int
    input_mean: float = 512.0
    input_pareto_alpha: float = 2.5
    output_mean: float = 512.0


@dataclass(frozen=True)
class LedgerEntry:
    """Exact energy of one event summed over devices"""
    t_start: float
    t_end: float
    energy_j: float
    phase: Phase
    batch_size: int = 0
    tokens: int = 0


@dataclass
class SimResult:
    traces: dict
    log: ServingLog
    ledger: list
    clock_origin: str
    tdp_w: float
    num_devices: int

    @property
    def batches(self):
        return self.log.batches

    @property
    def span(self):
        if not self.ledger:
            return (0.0, 0.0)
        return (self.ledger[0].t_start, self.ledger[-1].t_end)


class RequestState(Enum):
    WAITING = "waiting"
    RUNNING = "running"
    FINISHED = "finished"


class _SimRequest:
    """Mutable serving state of one LLM request"""
    def __init__(self, spec: LLMRequest):
        self.request_id = spec.request_id
        self.input_tokens = spec.input_tokens
        self.output_tokens = spec.output_tokens
        self.generated = 0
        self.state = RequestState.WAITING
        self.needs_prefill = True
        self.swapped_out = False
        self.first_token_t = None
        self.complete_t = None
        self.preemptions = 0

    def context_tokens(self):
        return self.input_tokens + self.generated


class _EventRecorder:
    """Back-to-back events on one clock"""
    def __init__(self, num_devices):
        self.num_devices = num_devices
        self.clock = 0.0
        self.events = []

    def record(self, phase: Phase, duration, power_w, batch_size, tokens=0):
        if duration <= 0:
            return None
        start = self.clock
        self.clock = start + duration
        self.events.append((start, self.clock, power_w, phase, batch_size, tokens))
        return self.clock

    def iterations(self):
        return [
            IterationLog(start, end, batch, tokens, phase)
            for start, end, _, phase, batch, tokens in self.events
        ]

    def ledger(self):
        return [
            LedgerEntry(start, end, power * (end - start) * self.num_devices, phase, batch, tokens)
            for start, end, power, phase, batch, tokens in self.events
        ]

    def traces(self, config: SimConfig, pm: PowerModel, clock_origin):
        """Sample every device on a fixed grid plus every event boundary"""
        if not self.events:
            return {}
        starts = np.array([e[0] for e in self.events])
        ends = np.array([e[1] for e in self.events])
        powers = np.array([e[2] for e in self.events])
        boundaries = np.concatenate((starts[:1], ends))
        grid = np.union1d(np.arange(boundaries[0], boundaries[-1], config.sampling_interval_s), boundaries)
        if config.trace_kind is TraceKind.ENERGY:
            counter = np.concatenate(([0.0], np.cumsum(powers * (ends - starts))))
            values = np.interp(grid, boundaries, counter)
        else:
            index = np.clip(np.searchsorted(boundaries, grid, side="right") - 1, 0, len(powers) - 1)
            values = powers[index]
        traces = {}
        for device in range(config.num_devices):
            device_id = f"sim-gpu{device}"
            traces[device_id] = PowerTrace(device_id, config.trace_kind, grid, values, pm.p_max, clock_origin)
        return traces


class LLMServer:
    """Iteration-level batching server with a KV-cache budget"""
    def __init__(self, config: SimConfig, lm: LatencyModel, pm: PowerModel):
        self.config = config
        self.lm = lm
        self.pm = pm
        self.recorder = _EventRecorder(config.num_devices)
        self.waiting = deque()
        self.running = []
        self.preemption_events = []

    @property
    def clock(self):
        return self.recorder.clock

    def _footprint(self, requests, extra=0):
        factor = self.config.kv_tokens_per_request_token
        return factor * sum(r.context_tokens() + extra for r in requests)

    def _preempt_overflow(self):
        """Evict the most recently admitted requests until the next decode fits"""
        while len(self.running) > 1 and self._footprint(self.running, 1) > self.config.kv_budget_tokens:
            victim = self.running.pop()
            victim.state = RequestState.WAITING
            victim.preemptions += 1
            mode = self.config.preemption_mode
            self.preemption_events.append(PreemptionEvent(victim.request_id, self.clock, mode))
            if mode is PreemptionMode.RECOMPUTE:
                victim.needs_prefill = True
            else:
                self.recorder.record(
                    Phase.SWAP,
                    self._footprint([victim]) / self.config.swap_bandwidth,
                    self.pm.swap_power(),
                    len(self.running),
                )
                victim.swapped_out = True
            self.waiting.appendleft(victim)

    def _admit(self):
        admitted = []
        while self.waiting and len(self.running) < self.config.max_batch_size:
            candidate = self.waiting[0]
            if self._footprint(self.running + [candidate], 1) > self.config.kv_budget_tokens:
                break
            self.waiting.popleft()
            candidate.state = RequestState.RUNNING
            self.running.append(candidate)
            admitted.append(candidate)
        return admitted

    def _prefill(self, admitted):
        for request in admitted:
            if request.swapped_out:
                self.recorder.record(
                    Phase.SWAP,
                    self._footprint([request]) / self.config.swap_bandwidth,
                    self.pm.swap_power(),
                    len(self.running),
                )
                request.swapped_out = False
        fresh = [r for r in admitted if r.needs_prefill]
        if not fresh:
            return
        # recompute re-reads the tokens generated before preemption
        tokens = sum(r.context_tokens() for r in fresh)
        self.recorder.record(
            Phase.PREFILL,
            self.lm.prefill_time(tokens, self.config.tp_degree),
            self.pm.prefill_power(),
            len(self.running),
        )
        for request in fresh:
            request.needs_prefill = False

    def _decode(self):
        batch = len(self.running)
        t_end = self.recorder.record(
            Phase.DECODE,
            self.lm.decode_time(batch, self.config.tp_degree),
            self.pm.decode_power(batch),
            batch,
            tokens=batch,
        )
        still_running = []
        for request in self.running:
            request.generated += 1
            if request.first_token_t is None:
                request.first_token_t = t_end
            if request.generated >= request.output_tokens:
                request.state = RequestState.FINISHED
                request.complete_t = t_end
            else:
                still_running.append(request)
        self.running = still_running

    def run(self, workload: SimWorkload):
        if workload.is_diffusion:
            raise SimulationError("LLM server cannot run a diffusion workload")
        if self.lm.decode_time(1, self.config.tp_degree) <= 0:
            raise InfeasibleConfig("decode iterations must take positive time")
        factor = self.config.kv_tokens_per_request_token
        for req in workload.requests:
            need = factor * (req.input_tokens + req.output_tokens)
            if need > self.config.kv_budget_tokens:
                raise InfeasibleConfig(
                    f"request {req.request_id} needs {need:g} KV tokens, "
                    f"budget is {self.config.kv_budget_tokens:g}"
                )
        requests = [_SimRequest(req) for req in workload.requests]
        self.waiting.extend(requests)

        steps = 0
        while self.waiting or self.running:
            steps += 1
            if steps > self.config.max_iterations:
                raise NonTerminating(f"simulation exceeded {self.config.max_iterations} scheduling steps")
            self._preempt_overflow()
            self._prefill(self._admit())
            if self.running:
                self._decode()

        log = ServingLog(
            records=[
                RequestRecord(
                    r.request_id, 0.0, r.complete_t,
                    input_tokens=r.input_tokens,
                    output_tokens=r.output_tokens,
                    first_token_t=r.first_token_t,
                    preemptions=r.preemptions,
                )
                for r in requests
            ],
            iterations=self.recorder.iterations(),
            preemptions=list(self.preemption_events),
        )
        logger.debug(
            "simulated %d requests in %.6g s with %d preemptions",
            len(requests), self.clock, len(self.preemption_events),
        )
        return _result(self.recorder, log, self.config, self.pm)


def _result(recorder, log, config, pm):
    clock_origin = f"sim:{config.seed}"
    return SimResult(
        traces=recorder.traces(config, pm, clock_origin),
        log=log,
        ledger=recorder.ledger(),
        clock_origin=clock_origin,
        tdp_w=pm.p_max,
        num_devices=config.num_devices,
    )


def simulate_llm(config: SimConfig, workload: SimWorkload, lm: LatencyModel, pm: PowerModel):
    """Serve `workload` with iteration-level batching; traces, log and ledger"""
    return LLMServer(config, lm, pm).run(workload)


def pixel_factor(resolution):
    """Latent size relative to a 512x512 image"""
    try:
        width, height = (int(v) for v in str(resolution).lower().split("x"))
    except ValueError as err:
        raise InfeasibleConfig(f"resolution must look like 512x512, got {resolution!r}") from err
    if width < 1 or height < 1:
        raise InfeasibleConfig(f"resolution must be positive, got {resolution!r}")
    return width * height / REFERENCE_PIXELS


def simulate_diffusion(config: SimConfig, workload: SimWorkload, lm: LatencyModel, pm: PowerModel):
    """Generate fixed-size batches in submission order"""
    if workload.requests and not workload.is_diffusion:
        raise SimulationError("diffusion server cannot run an LLM workload")
    recorder = _EventRecorder(config.num_devices)
    records, batches = [], []
    requests = list(workload.requests)
    for index, first in enumerate(range(0, len(requests), config.max_batch_size)):
        group = requests[first:first + config.max_batch_size]
        size = len(group)
        steps = max(r.steps for r in group)
        factor = max(pixel_factor(r.resolution) for r in group)
        step_time = lm.step_time(size, factor)
        if step_time <= 0:
            raise InfeasibleConfig("denoising steps must take positive time")
        t_start = recorder.clock
        recorder.record(Phase.ENCODE, lm.encode_s, pm.encode_power(), size)
        for _ in range(steps):
            recorder.record(Phase.DENOISE, step_time, pm.denoise_power(), size)
        recorder.record(Phase.DECODE_IMAGE, lm.decode_image_s, pm.image_decode_power(), size)
        batch_id = f"b{index:04d}"
        request_ids = tuple(r.request_id for r in group)
        batches.append(BatchGroup(batch_id, t_start, recorder.clock, size, request_ids))
        for request in group:
            records.append(RequestRecord(request.request_id, 0.0, recorder.clock, batch_id=batch_id))

    log = ServingLog(records=records, iterations=recorder.iterations(), batches=batches)
    return _result(recorder, log, config, pm)


def simulate(config, workload, lm, pm):
    if workload.is_diffusion:
        return simulate_diffusion(config, workload, lm, pm)
    return simulate_llm(config, workload, lm, pm)


def synth_workload(spec: WorkloadSpec, seed=0):
    """Pareto-distributed prompt lengths and exponential output lengths

    The Pareto scale is chosen so the distribution mean equals input_mean.
    """
    alpha = spec.input_pareto_alpha
    if not alpha > 1:
        raise InvalidDistributionParams(f"Pareto alpha must exceed 1 for a finite mean, got {alpha}")
    if spec.input_mean < 1 or spec.output_mean < 1:
        raise InvalidDistributionParams("input and output means must be >= 1")
    if spec.n_requests < 1:
        raise InvalidDistributionParams("n_requests must be >= 1")
    scale = pareto_scale(spec.input_mean, alpha)
    rng = np.random.default_rng(seed)
    inputs = scale * (1.0 + rng.pareto(alpha, spec.n_requests))
    outputs = rng.exponential(spec.output_mean, spec.n_requests)
    return SimWorkload(tuple(
        LLMRequest(f"r{k:05d}", max(1, math.ceil(i)), max(1, math.ceil(o)))
        for k, (i, o) in enumerate(zip(inputs, outputs))
    ))


def pareto_scale(mean, alpha):
    return mean * (alpha - 1) / alpha


def diffusion_workload(n_requests, steps, resolution="512x512"):
    return SimWorkload(tuple(
        DiffusionRequest(f"r{k:05d}", steps, resolution) for k in range(n_requests)
    ))


def format_workload(workload: SimWorkload):
    for request in workload.requests:
        if isinstance(request, DiffusionRequest):
            yield json.dumps({"id": request.request_id, "steps": request.steps, "resolution": request.resolution})
            continue
        line = {
            "id": request.request_id,
            "input_tokens": request.input_tokens,
            "output_tokens": request.output_tokens,
        }
        if request.prompt is not None:
            line["prompt"] = request.prompt
        yield json.dumps(line)


def write_workload(path, workload: SimWorkload):
    with open(path, "w", encoding="utf-8") as fp:
        for line in format_workload(workload):
            fp.write(line + "\n")


def read_workload(path):
    requests = []
    with open(path, "rb") as fp:
        for line_no, line in numbered_lines(fp):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                if "steps" in entry:
                    requests.append(DiffusionRequest(
                        str(entry["id"]), int(entry["steps"]), entry.get("resolution", "512x512")
                    ))
                else:
                    requests.append(LLMRequest(
                        str(entry["id"]), int(entry["input_tokens"]),
                        int(entry["output_tokens"]), entry.get("prompt"),
                    ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise MalformedRecord(f"{path}:{line_no}: bad dataset entry ({err})") from err
    return SimWorkload(tuple(requests))


def format_ledger(ledger):
    for entry in ledger:
        yield json.dumps({
            "t_start": entry.t_start,
            "t_end": entry.t_end,
            "energy_j": entry.energy_j,
            "phase": entry.phase.value,
        })


def write_ledger(path, ledger):
    with open(path, "w", encoding="utf-8") as fp:
        for line in format_ledger(ledger):
            fp.write(line + "\n")
