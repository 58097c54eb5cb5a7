"""
Steady-state detection and per-request energy accounting
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum

from errors import (
    AccountingError,
    EmptyBatch,
    EmptyInput,
    SteadyStateNotFound,
    WindowOutOfRange,
    ZeroMeasuredEnergy,
    ZeroSteadyTokens,
)
from meter import merge_energy
from telemetry import Phase, batch_timeline

logger = logging.getLogger(__name__)

DEFAULT_GAP_FRACTION = 0.01
DEFAULT_MIN_FRACTION = 0.10


class AccountingMethod(Enum):
    STEADY_STATE = "steady-state"
    BATCH_DIVISION = "batch-division"


@dataclass(frozen=True)
class SteadyParams:
    """Knobs for steady-state detection; gap tolerance defaults to 1% of the run span"""
    gap_tolerance_s: float | None = None
    min_fraction: float = DEFAULT_MIN_FRACTION
    allow_unsaturated: bool = False
    decode_only: bool = False


@dataclass(frozen=True)
class SteadyWindow:
    t0: float
    t1: float
    saturation_fraction: float
    tokens_steady: int = 0
    energy_steady: float = 0.0
    steady: bool = True

    @property
    def duration(self):
        return self.t1 - self.t0


@dataclass(frozen=True)
class EnergyAccount:
    energy_per_request: float
    energy_per_token: float | None
    per_request_energy: dict
    method: AccountingMethod
    window: SteadyWindow | None = None
    batch_energy: dict = field(default_factory=dict)
    flags: tuple = ()


def _saturated_time(timeline, max_batch_size, t0, t1):
    return math.fsum(
        min(b, t1) - max(a, t0)
        for a, b, size in timeline.intervals()
        if size >= max_batch_size and b > t0 and a < t1
    )


def detect_steady_state(timeline, max_batch_size, gap_tolerance_s=None, min_fraction=DEFAULT_MIN_FRACTION):
    """Find the longest stretch where the batch sits at max_batch_size

    Saturated intervals separated by gaps shorter than `gap_tolerance_s` are
    merged. The winner must last at least `min_fraction` of the run span.
    """
    if max_batch_size < 1:
        raise AccountingError(f"max_batch_size must be >= 1, got {max_batch_size}")
    if timeline.is_empty:
        raise SteadyStateNotFound("empty batch timeline", 0)
    begin, end = timeline.run_span
    span = end - begin
    tolerance = DEFAULT_GAP_FRACTION * span if gap_tolerance_s is None else gap_tolerance_s

    merged = []
    for a, b, size in timeline.intervals():
        if size < max_batch_size:
            continue
        if merged and (a - merged[-1][1] <= 0 or a - merged[-1][1] < tolerance):
            merged[-1] = (merged[-1][0], b)
        else:
            merged.append((a, b))
    if not merged:
        raise SteadyStateNotFound(
            f"batch size never reached the configured maximum {max_batch_size}",
            timeline.max_batch_size,
        )

    t0, t1 = max(merged, key=lambda w: w[1] - w[0])
    if t1 - t0 < min_fraction * span:
        raise SteadyStateNotFound(
            f"longest saturated window lasts {t1 - t0:.6g} s, "
            f"less than {min_fraction:.0%} of the {span:.6g} s run",
            timeline.max_batch_size,
        )
    saturation = _saturated_time(timeline, max_batch_size, t0, t1) / (t1 - t0)
    return SteadyWindow(t0, t1, saturation)


def steady_window_or_fallback(timeline, max_batch_size, params=SteadyParams()):
    """detect_steady_state, falling back to the central half of the run when allowed"""
    try:
        return detect_steady_state(timeline, max_batch_size, params.gap_tolerance_s, params.min_fraction)
    except SteadyStateNotFound as err:
        if not params.allow_unsaturated or timeline.is_empty:
            raise
        begin, end = timeline.run_span
        quarter = (end - begin) / 4
        t0, t1 = begin + quarter, end - quarter
        logger.warning(
            "NO STEADY STATE (%s); accounting over the central 50%% of the run [%.6g, %.6g] "
            "and flagging the result non-steady",
            err, t0, t1,
        )
        saturation = _saturated_time(timeline, max_batch_size, t0, t1) / (t1 - t0)
        return SteadyWindow(t0, t1, saturation, steady=False)


def llm_account(traces, records, iterations, window: SteadyWindow, decode_only=False):
    """Per-request energy from steady-state energy per token

    Energy per token is window energy over tokens emitted by decode iterations
    whose midpoint lies in the window; a request costs that times its output
    length.
    """
    records = [r for r in records if not r.is_diffusion]
    if not records:
        raise EmptyInput("no completed LLM requests to account")
    if iterations:
        first = min(it.t_start for it in iterations)
        last = max(it.t_end for it in iterations)
        if window.t0 < first - 1e-9 or window.t1 > last + 1e-9:
            raise WindowOutOfRange(f"window [{window.t0!r}, {window.t1!r}] outside the serving log")

    decode = [
        it for it in iterations
        if it.phase is Phase.DECODE and window.t0 <= it.midpoint <= window.t1
    ]
    tokens = sum(it.tokens_emitted for it in decode)
    if tokens == 0:
        raise ZeroSteadyTokens(f"no decode tokens inside [{window.t0:.6g}, {window.t1:.6g}]")

    if decode_only:
        energy = math.fsum(merge_energy(traces, it.t_start, it.t_end) for it in decode)
    else:
        energy = merge_energy(traces, window.t0, window.t1)

    per_token = energy / tokens
    mean_output = math.fsum(r.output_tokens for r in records) / len(records)
    flags = []
    if decode_only:
        flags.append("decode-only")
    if not window.steady:
        flags.append("non-steady")
    return EnergyAccount(
        energy_per_request=per_token * mean_output,
        energy_per_token=per_token,
        per_request_energy={r.request_id: per_token * r.output_tokens for r in records},
        method=AccountingMethod.STEADY_STATE,
        window=replace(window, tokens_steady=tokens, energy_steady=energy),
        flags=tuple(flags),
    )


def diffusion_account(traces, batch_groups):
    """Per-request energy as batch energy divided by batch size"""
    batch_groups = list(batch_groups)
    if not batch_groups:
        raise EmptyInput("no diffusion batches to account")
    batch_energy = {}
    per_request = {}
    for group in batch_groups:
        if group.size < 1:
            raise EmptyBatch(f"batch {group.batch_id} has no requests")
        energy = merge_energy(traces, group.t_start, group.t_end)
        batch_energy[group.batch_id] = energy
        request_ids = group.request_ids or tuple(f"{group.batch_id}/{k}" for k in range(group.size))
        if len(request_ids) != group.size:
            raise AccountingError(
                f"batch {group.batch_id} lists {len(request_ids)} requests but has size {group.size}"
            )
        for request_id in request_ids:
            per_request[request_id] = energy / group.size

    total_requests = sum(group.size for group in batch_groups)
    return EnergyAccount(
        energy_per_request=math.fsum(batch_energy.values()) / total_requests,
        energy_per_token=None,
        per_request_energy=per_request,
        method=AccountingMethod.BATCH_DIVISION,
        batch_energy=batch_energy,
    )


def tdp_overestimate_ratio(traces, t0, t1, tdp_w, num_devices):
    """How many times a TDP x time estimate exceeds measured energy"""
    if tdp_w <= 0:
        raise AccountingError(f"TDP must be positive, got {tdp_w}")
    measured = merge_energy(traces, t0, t1)
    if measured <= 0:
        raise ZeroMeasuredEnergy(f"no energy measured in [{t0:.6g}, {t1:.6g}]")
    return tdp_w * num_devices * (t1 - t0) / measured


def tdp_energy_estimate(account: EnergyAccount, ratio):
    """Per-request energy a TDP-based estimate would have reported"""
    return account.energy_per_request * ratio


def account_llm_run(traces, log, max_batch_size, params=SteadyParams()):
    """Timeline, steady window and steady-state account for one LLM run"""
    timeline = batch_timeline(log.iterations)
    window = steady_window_or_fallback(timeline, max_batch_size, params)
    return llm_account(traces, log.records, log.iterations, window, decode_only=params.decode_only)


def account_diffusion_run(traces, log):
    return diffusion_account(traces, log.batches)
