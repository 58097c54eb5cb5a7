"""
Serving log parsing, batch-size timelines and latency metrics
"""

import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from enum import Enum

from errors import (
    DuplicateLifecycle,
    EmptyInput,
    MalformedEvent,
    MissingFirstToken,
    OrphanEvent,
    OverlappingIterations,
)
from meter import numbered_lines

logger = logging.getLogger(__name__)

# Iterations may touch; they may not overlap by more than this
OVERLAP_EPSILON = 1e-9


class Phase(Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    DENOISE = "denoise-step"
    ENCODE = "encode"
    DECODE_IMAGE = "decode-image"
    SWAP = "swap"


class PreemptionMode(Enum):
    RECOMPUTE = "recompute"
    SWAP = "swap"


@dataclass(frozen=True)
class RequestRecord:
    """Lifecycle of one served request"""
    request_id: str
    submit_t: float
    complete_t: float
    input_tokens: int = 0
    output_tokens: int = 0
    first_token_t: float | None = None
    preemptions: int = 0
    batch_id: str | None = None

    @property
    def is_diffusion(self):
        return self.batch_id is not None


@dataclass(frozen=True)
class IterationLog:
    """One scheduling step of the server"""
    t_start: float
    t_end: float
    batch_size: int
    tokens_emitted: int
    phase: Phase

    @property
    def duration(self):
        return self.t_end - self.t_start

    @property
    def midpoint(self):
        return 0.5 * (self.t_start + self.t_end)


@dataclass(frozen=True)
class PreemptionEvent:
    request_id: str
    t: float
    mode: PreemptionMode


@dataclass(frozen=True)
class BatchGroup:
    """A diffusion batch generated as a whole"""
    batch_id: str
    t_start: float
    t_end: float
    size: int
    request_ids: tuple = ()


@dataclass
class ServingLog:
    """Everything recovered from one serving log"""
    records: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    incomplete: list = field(default_factory=list)
    incomplete_submit_t: dict = field(default_factory=dict)
    preemptions: list = field(default_factory=list)
    batches: list = field(default_factory=list)

    def __iter__(self):
        # unpacks as (records, iterations)
        return iter((self.records, self.iterations))

    @property
    def span(self):
        times = [r.submit_t for r in self.records] + [r.complete_t for r in self.records]
        times += [it.t_start for it in self.iterations] + [it.t_end for it in self.iterations]
        if not times:
            return (0.0, 0.0)
        return (min(times), max(times))


@dataclass(frozen=True)
class BatchTimeline:
    """Right-continuous step function of running batch size"""
    breakpoints: tuple = ()
    run_span: tuple = (0.0, 0.0)

    @property
    def is_empty(self):
        return not self.breakpoints

    @property
    def max_batch_size(self):
        return max((b for _, b in self.breakpoints), default=0)

    def value_at(self, t):
        value = 0
        for t_b, b in self.breakpoints:
            if t_b > t:
                break
            value = b
        return value

    def intervals(self):
        """Yield (t_start, t_end, batch_size) pieces covering the run span"""
        for (t_a, b), (t_b, _) in zip(self.breakpoints, self.breakpoints[1:]):
            yield t_a, t_b, b

    def integral(self, t0=None, t1=None):
        """Batch-size seconds over [t0, t1]"""
        t0 = self.run_span[0] if t0 is None else t0
        t1 = self.run_span[1] if t1 is None else t1
        return math.fsum(
            b * (min(t_b, t1) - max(t_a, t0))
            for t_a, t_b, b in self.intervals()
            if t_b > t0 and t_a < t1
        )


@dataclass(frozen=True)
class LatencySummary:
    """Mean and per-request latency figures; per-request maps are keyed by request id"""
    mean_tpot: float
    mean_ttft: float
    mean_e2e: float
    tpot: dict
    ttft: dict
    e2e: dict


def _field(event, key, kind, line_no, required=True, default=None):
    if key not in event:
        if required:
            raise MalformedEvent(f"line {line_no}: {event.get('type')} event missing {key!r}")
        return default
    value = event[key]
    if kind is str:
        ok = isinstance(value, str) and value != ""
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool) and value >= 0
    else:
        ok = (
            isinstance(value, (int, float))
            and not isinstance(value, bool)
            and math.isfinite(value)
        )
    if not ok:
        raise MalformedEvent(f"line {line_no}: field {key!r} has invalid value {value!r}")
    return float(value) if kind is float else value


def parse_serving_log(stream):
    """Join lifecycle events into RequestRecords and collect iteration logs

    Requests without a completion event are reported in `incomplete` and left
    out of `records`.
    """
    submits = {}
    first_tokens = {}
    completes = {}
    preempt_counts = {}
    log = ServingLog()

    for line_no, line in numbered_lines(stream, MalformedEvent):
        line = line.strip()
        if not line:
            continue
        try:
            event = json.loads(line)
        except json.JSONDecodeError as err:
            raise MalformedEvent(f"line {line_no}: not a JSON object ({err.msg})") from err
        if not isinstance(event, dict):
            raise MalformedEvent(f"line {line_no}: not a JSON object")
        kind = event.get("type")

        if kind == "iteration":
            phase_name = _field(event, "phase", str, line_no)
            try:
                phase = Phase(phase_name)
            except ValueError as err:
                raise MalformedEvent(f"line {line_no}: unknown phase {phase_name!r}") from err
            iteration = IterationLog(
                _field(event, "t_start", float, line_no),
                _field(event, "t_end", float, line_no),
                _field(event, "batch_size", int, line_no),
                _field(event, "tokens_emitted", int, line_no),
                phase,
            )
            if iteration.t_end <= iteration.t_start or iteration.batch_size < 1:
                raise MalformedEvent(f"line {line_no}: iteration needs t_start < t_end and batch_size >= 1")
            log.iterations.append(iteration)
            continue

        if kind == "batch":
            batch = BatchGroup(
                _field(event, "batch_id", str, line_no),
                _field(event, "t_start", float, line_no),
                _field(event, "t_end", float, line_no),
                _field(event, "size", int, line_no),
                tuple(event.get("request_ids", ())),
            )
            log.batches.append(batch)
            continue

        request_id = _field(event, "id", str, line_no)
        t = _field(event, "t", float, line_no)
        if kind == "request_submit":
            if request_id in submits:
                raise DuplicateLifecycle(f"line {line_no}: request {request_id} submitted twice")
            submits[request_id] = (t, _field(event, "input_tokens", int, line_no, required=False, default=0))
        elif kind in ("first_token", "request_complete", "preemption"):
            if request_id not in submits:
                raise OrphanEvent(f"line {line_no}: {kind} for unknown request {request_id}")
            if kind == "first_token":
                if request_id in first_tokens:
                    raise DuplicateLifecycle(f"line {line_no}: second first_token for {request_id}")
                first_tokens[request_id] = t
            elif kind == "request_complete":
                if request_id in completes:
                    raise DuplicateLifecycle(f"line {line_no}: request {request_id} completed twice")
                completes[request_id] = (
                    t,
                    _field(event, "output_tokens", int, line_no, required=False, default=0),
                    event.get("batch_id"),
                )
            else:
                mode_name = _field(event, "mode", str, line_no)
                try:
                    mode = PreemptionMode(mode_name)
                except ValueError as err:
                    raise MalformedEvent(f"line {line_no}: unknown preemption mode {mode_name!r}") from err
                log.preemptions.append(PreemptionEvent(request_id, t, mode))
                preempt_counts[request_id] = preempt_counts.get(request_id, 0) + 1
        else:
            raise MalformedEvent(f"line {line_no}: unknown event type {kind!r}")

    for request_id, (submit_t, input_tokens) in submits.items():
        if request_id not in completes:
            log.incomplete.append(request_id)
            log.incomplete_submit_t[request_id] = submit_t
            continue
        complete_t, output_tokens, batch_id = completes[request_id]
        if batch_id is None and output_tokens < 1:
            raise MalformedEvent(f"request {request_id}: completed with no output tokens")
        first_t = first_tokens.get(request_id)
        if complete_t < submit_t or (first_t is not None and not submit_t <= first_t <= complete_t):
            raise MalformedEvent(f"request {request_id}: lifecycle timestamps out of order")
        log.records.append(RequestRecord(
            request_id,
            submit_t,
            complete_t,
            input_tokens=input_tokens,
            output_tokens=output_tokens,
            first_token_t=first_t,
            preemptions=preempt_counts.get(request_id, 0),
            batch_id=batch_id,
        ))

    if log.incomplete:
        logger.warning("%d incomplete request(s) excluded from metrics", len(log.incomplete))
    return log


def format_serving_log(log: ServingLog):
    """Yield the line-delimited file form of `log`, ordered by time"""
    events = []
    for order, record in enumerate(log.records):
        events.append((record.submit_t, 0, order, {
            "type": "request_submit", "id": record.request_id,
            "t": record.submit_t, "input_tokens": record.input_tokens,
        }))
        if record.first_token_t is not None:
            events.append((record.first_token_t, 2, order, {
                "type": "first_token", "id": record.request_id, "t": record.first_token_t,
            }))
        complete = {
            "type": "request_complete", "id": record.request_id,
            "t": record.complete_t, "output_tokens": record.output_tokens,
        }
        if record.batch_id is not None:
            complete["batch_id"] = record.batch_id
        events.append((record.complete_t, 3, order, complete))
    first_t = log.span[0]
    for order, request_id in enumerate(log.incomplete, start=len(log.records)):
        submit_t = log.incomplete_submit_t.get(request_id, first_t)
        events.append((submit_t, 0, order, {"type": "request_submit", "id": request_id, "t": submit_t}))
    for order, event in enumerate(log.preemptions):
        events.append((event.t, 1, order, {
            "type": "preemption", "id": event.request_id, "t": event.t, "mode": event.mode.value,
        }))
    for order, it in enumerate(log.iterations):
        events.append((it.t_start, 4, order, {
            "type": "iteration", "t_start": it.t_start, "t_end": it.t_end,
            "batch_size": it.batch_size, "tokens_emitted": it.tokens_emitted, "phase": it.phase.value,
        }))
    for order, batch in enumerate(log.batches):
        events.append((batch.t_start, 5, order, {
            "type": "batch", "batch_id": batch.batch_id, "t_start": batch.t_start,
            "t_end": batch.t_end, "size": batch.size, "request_ids": list(batch.request_ids),
        }))
    events.sort(key=lambda e: e[:3])
    for *_, event in events:
        yield json.dumps(event)


def write_serving_log(path, log: ServingLog):
    with open(path, "w", encoding="utf-8") as fp:
        for line in format_serving_log(log):
            fp.write(line + "\n")


def read_serving_log(path):
    with open(path, "rb") as fp:
        return parse_serving_log(fp)


def batch_timeline(iterations):
    """Build the batch-size step function from iteration logs

    Gaps between iterations read as batch size 0. Equal consecutive values
    are coalesced so breakpoints stay strictly increasing.
    """
    iterations = sorted(iterations, key=lambda it: (it.t_start, it.t_end))
    if not iterations:
        logger.warning("no iterations in serving log; timeline is empty")
        return BatchTimeline()

    points = []

    def push(t, b):
        if points and points[-1][0] == t:
            points[-1] = (t, b)
        else:
            points.append((t, b))
        if len(points) >= 2 and points[-1][1] == points[-2][1]:
            points.pop()

    previous_end = None
    for it in iterations:
        if previous_end is not None:
            if it.t_start < previous_end - OVERLAP_EPSILON:
                raise OverlappingIterations(
                    f"iteration starting at {it.t_start!r} overlaps one ending at {previous_end!r}"
                )
            if it.t_start > previous_end:
                push(previous_end, 0)
        push(max(it.t_start, previous_end or it.t_start), it.batch_size)
        previous_end = it.t_end
    push(previous_end, 0)
    return BatchTimeline(tuple(points), (iterations[0].t_start, previous_end))


def latency_metrics(records):
    """Per-request TTFT, TPOT and end-to-end latency and their means

    TPOT divides the time after the first token by the number of inter-token
    gaps, output_tokens - 1, clamped at one. Diffusion records have no token
    stream: TTFT equals end-to-end latency and TPOT is zero.
    """
    records = sorted(records, key=lambda r: r.request_id)
    if not records:
        raise EmptyInput("no completed requests")
    ttft, tpot, e2e = {}, {}, {}
    for record in records:
        e2e[record.request_id] = record.complete_t - record.submit_t
        if record.is_diffusion:
            ttft[record.request_id] = e2e[record.request_id]
            tpot[record.request_id] = 0.0
            continue
        if record.first_token_t is None:
            raise MissingFirstToken(f"request {record.request_id} has no first_token event")
        ttft[record.request_id] = record.first_token_t - record.submit_t
        tpot[record.request_id] = (record.complete_t - record.first_token_t) / max(1, record.output_tokens - 1)

    def mean(values):
        return math.fsum(values.values()) / len(values)

    return LatencySummary(mean(tpot), mean(ttft), mean(e2e), tpot, ttft, e2e)


def output_length_stats(records):
    """Verbosity of a run: mean, median and max output tokens"""
    lengths = [r.output_tokens for r in records if not r.is_diffusion]
    if not lengths:
        return {"mean": 0.0, "median": 0.0, "max": 0}
    return {
        "mean": math.fsum(lengths) / len(lengths),
        "median": float(statistics.median(lengths)),
        "max": max(lengths),
    }
