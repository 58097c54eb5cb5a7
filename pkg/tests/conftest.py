import math

import numpy as np
import pytest

from meter import PowerTrace, TraceKind
from simulator import LatencyModel, LLMRequest, PowerModel, SimConfig, SimWorkload
from telemetry import IterationLog, Phase, RequestRecord


def power_trace(times, watts, device="gpu0", tdp=None):
    return PowerTrace(device, TraceKind.POWER, np.asarray(times, dtype=float), np.asarray(watts, dtype=float), tdp)


def energy_trace(times, joules, device="gpu0"):
    return PowerTrace(device, TraceKind.ENERGY, np.asarray(times, dtype=float), np.asarray(joules, dtype=float))


def constant_trace(watts, t0=0.0, t1=10.0, step=0.01, device="gpu0", tdp=None):
    times = np.linspace(t0, t1, int(round((t1 - t0) / step)) + 1)
    return power_trace(times, np.full_like(times, watts), device, tdp)


def decode(t0, t1, batch, tokens=None):
    return IterationLog(t0, t1, batch, batch if tokens is None else tokens, Phase.DECODE)


def llm_record(request_id, output_tokens, submit=0.0, first=None, complete=None):
    return RequestRecord(
        request_id, submit,
        complete if complete is not None else submit + 1.0,
        input_tokens=16, output_tokens=output_tokens,
        first_token_t=first if first is not None else submit + 0.1,
    )


def ledger_energy(ledger, t0, t1):
    """Sum of ledger entries whose midpoint lies in [t0, t1]"""
    return math.fsum(e.energy_j for e in ledger if t0 <= 0.5 * (e.t_start + e.t_end) <= t1)


def uniform_workload(n, input_tokens, output_tokens):
    return SimWorkload(tuple(LLMRequest(f"r{k:03d}", input_tokens, output_tokens) for k in range(n)))


@pytest.fixture
def flat_models():
    """Decode-only cost model with no prefill cost"""
    latency = LatencyModel(decode_base_s=0.005, decode_per_seq_s=0.0005)
    power = PowerModel(p_idle=100.0, p_max=400.0, kappa=1.0, b_ref=16.0)
    return latency, power


@pytest.fixture
def small_config():
    return SimConfig(max_batch_size=8, sampling_interval_s=0.001)
