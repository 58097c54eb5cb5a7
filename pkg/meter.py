"""
Power trace parsing and exact energy over time windows
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.integrate import trapezoid

from errors import (
    ClockOriginMismatch,
    EmptyInput,
    EmptyTrace,
    MalformedRecord,
    MixedKind,
    NonMonotonicTime,
    WindowOutOfRange,
    ZeroDuration,
)

logger = logging.getLogger(__name__)

# Window endpoints this close to the sampled range are clamped onto it
TIME_EPSILON = 1e-9


class TraceKind(Enum):
    POWER = "instantaneous-power"
    ENERGY = "cumulative-energy"

    @property
    def field(self):
        """Record field carrying the sample value"""
        return "power_w" if self is TraceKind.POWER else "energy_j"


@dataclass(frozen=True)
class PowerSample:
    """One timestamped power (W) or cumulative energy (J) reading"""
    device_id: str
    t: float
    value: float


@dataclass(frozen=True, eq=False)
class PowerTrace:
    """Immutable, time-ordered samples of one device"""
    device_id: str
    kind: TraceKind
    times: np.ndarray
    values: np.ndarray
    declared_max_power: float | None = None
    clock_origin: str | None = None

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        values = np.array(self.values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape:
            raise MalformedRecord("times and values must be equal-length vectors", self.device_id)
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise MalformedRecord("non-finite sample", self.device_id)
        steps = np.diff(times)
        if np.any(steps <= 0):
            bad = float(times[1:][steps <= 0][0])
            raise NonMonotonicTime(f"sample times not strictly increasing at t={bad!r}", self.device_id)
        if self.kind is TraceKind.POWER and np.any(values < 0):
            raise MalformedRecord("negative instantaneous power", self.device_id)
        if self.kind is TraceKind.ENERGY and np.any(np.diff(values) < 0):
            raise MalformedRecord("cumulative energy counter decreased", self.device_id)
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_samples(cls, device_id, kind: TraceKind, samples, declared_max_power=None, clock_origin=None):
        samples = list(samples)
        return cls(
            device_id,
            kind,
            np.array([s.t for s in samples], dtype=float),
            np.array([s.value for s in samples], dtype=float),
            declared_max_power,
            clock_origin,
        )

    @property
    def samples(self):
        return tuple(
            PowerSample(self.device_id, float(t), float(v))
            for t, v in zip(self.times, self.values)
        )

    @property
    def span(self):
        """First and last sample time"""
        if len(self.times) == 0:
            return (0.0, 0.0)
        return (float(self.times[0]), float(self.times[-1]))

    def __len__(self):
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, PowerTrace):
            return NotImplemented
        return (
            self.device_id == other.device_id
            and self.kind is other.kind
            and self.declared_max_power == other.declared_max_power
            and self.clock_origin == other.clock_origin
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def _number(record, key, line_no):
    value = record.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MalformedRecord(f"line {line_no}: field {key!r} must be a finite number, got {value!r}")
    return float(value)


def numbered_lines(stream, error=MalformedRecord):
    """Number the lines of a text or binary stream, decoding bytes as UTF-8"""
    for line_no, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError as err:
                raise error(f"line {line_no}: not valid UTF-8 ({err.reason})") from err
        yield line_no, line


def parse_power_trace(stream, clock_origin=None):
    """Parse line-delimited power records into one PowerTrace per device

    `stream` is any iterable of text or UTF-8 encoded lines. When
    `clock_origin` is given, a header declaring a different origin is rejected.
    """
    declared_origin = None
    tdp_w = None
    kinds = {}
    samples = {}

    for line_no, line in numbered_lines(stream):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as err:
            raise MalformedRecord(f"line {line_no}: not a JSON object ({err.msg})") from err
        if not isinstance(record, dict):
            raise MalformedRecord(f"line {line_no}: not a JSON object")

        if "meta" in record:
            meta = record["meta"]
            if not isinstance(meta, dict):
                raise MalformedRecord(f"line {line_no}: meta header must be an object")
            declared_origin = meta.get("clock_origin", declared_origin)
            if meta.get("tdp_w") is not None:
                tdp_w = _number(meta, "tdp_w", line_no)
            if clock_origin is not None and declared_origin is not None and declared_origin != clock_origin:
                raise ClockOriginMismatch(
                    f"trace declares clock origin {declared_origin!r}, run uses {clock_origin!r}"
                )
            continue

        device = record.get("device")
        if not isinstance(device, str) or not device:
            raise MalformedRecord(f"line {line_no}: missing device id")
        t = _number(record, "t", line_no)
        has_power = "power_w" in record
        has_energy = "energy_j" in record
        if has_power == has_energy:
            raise MalformedRecord(f"line {line_no}: exactly one of power_w / energy_j required", device)
        kind = TraceKind.POWER if has_power else TraceKind.ENERGY
        if kinds.setdefault(device, kind) is not kind:
            raise MixedKind(f"line {line_no}: {kind.field} record in a {kinds[device].value} trace", device)
        samples.setdefault(device, []).append((t, _number(record, kind.field, line_no)))

    traces = {}
    for device in sorted(samples):
        points = sorted(samples[device], key=lambda p: p[0])
        for (t_prev, _), (t_next, _) in zip(points, points[1:]):
            if t_prev == t_next:
                raise NonMonotonicTime(f"duplicate sample at t={t_next!r}", device)
        traces[device] = PowerTrace(
            device,
            kinds[device],
            np.array([p[0] for p in points]),
            np.array([p[1] for p in points]),
            declared_max_power=tdp_w,
            clock_origin=clock_origin if clock_origin is not None else declared_origin,
        )
    return traces


def load_power_traces(paths, clock_origin=None):
    """Read trace files sharing one clock domain into a device -> trace map"""
    traces = {}
    for path in paths:
        with open(path, "rb") as fp:
            parsed = parse_power_trace(fp, clock_origin)
        for device, trace in parsed.items():
            if clock_origin is None:
                clock_origin = trace.clock_origin
            elif trace.clock_origin is not None and trace.clock_origin != clock_origin:
                raise ClockOriginMismatch(
                    f"{path} declares clock origin {trace.clock_origin!r}, run uses {clock_origin!r}",
                    device,
                )
            if device in traces:
                raise MalformedRecord(f"device appears in more than one trace file ({path})", device)
            traces[device] = trace
    return traces


def format_power_trace(traces, clock_origin=None, tdp_w=None):
    """Yield the line-delimited file form of `traces` (header first)"""
    meta = {}
    if clock_origin is not None:
        meta["clock_origin"] = clock_origin
    if tdp_w is not None:
        meta["tdp_w"] = float(tdp_w)
    if meta:
        yield json.dumps({"meta": meta})
    for trace in sorted(traces, key=lambda tr: tr.device_id):
        field = trace.kind.field
        for t, value in zip(trace.times, trace.values):
            yield json.dumps({"device": trace.device_id, "t": float(t), field: float(value)})


def write_power_trace(path, traces, clock_origin=None, tdp_w=None):
    with open(path, "w", encoding="utf-8") as fp:
        for line in format_power_trace(traces, clock_origin, tdp_w):
            fp.write(line + "\n")


def _check_window(trace: PowerTrace, t0, t1):
    if len(trace) < 2:
        raise EmptyTrace("at least two samples are needed for a window query", trace.device_id)
    t0 = float(t0)
    t1 = float(t1)
    if not (math.isfinite(t0) and math.isfinite(t1)) or t1 < t0:
        raise WindowOutOfRange(f"invalid window [{t0!r}, {t1!r}]", trace.device_id)
    first, last = trace.span
    if t0 < first - TIME_EPSILON or t1 > last + TIME_EPSILON:
        raise WindowOutOfRange(
            f"window [{t0!r}, {t1!r}] outside sampled range [{first!r}, {last!r}]",
            trace.device_id,
        )
    return max(t0, first), min(t1, last)


def energy_in_window(trace: PowerTrace, t0, t1):
    """Joules drawn by one device over [t0, t1]

    Power traces are integrated with the trapezoidal rule, interpolating
    linearly at both window edges. Energy counters are interpolated at the
    edges and differenced.
    """
    t0, t1 = _check_window(trace, t0, t1)
    if t1 <= t0:
        return 0.0
    times, values = trace.times, trace.values
    if trace.kind is TraceKind.ENERGY:
        e0, e1 = np.interp([t0, t1], times, values)
        return max(0.0, float(e1 - e0))

    lo = np.searchsorted(times, t0, side="right")
    hi = np.searchsorted(times, t1, side="left")
    edge_power = np.interp([t0, t1], times, values)
    t = np.concatenate(([t0], times[lo:hi], [t1]))
    p = np.concatenate((edge_power[:1], values[lo:hi], edge_power[1:]))
    return max(0.0, float(trapezoid(p, t)))


def average_power(trace: PowerTrace, t0, t1):
    """Mean watts over [t0, t1]"""
    if float(t1) == float(t0):
        raise ZeroDuration(f"zero-length window at t={float(t0)!r}", trace.device_id)
    energy = energy_in_window(trace, t0, t1)
    return energy / (float(t1) - float(t0))


def merge_energy(traces, t0, t1):
    """Total joules over [t0, t1] summed across devices"""
    traces = list(traces)
    if not traces:
        raise EmptyInput("no power traces to merge")
    return math.fsum(energy_in_window(trace, t0, t1) for trace in traces)


def common_span(traces):
    """Interval covered by every trace"""
    traces = list(traces)
    if not traces:
        raise EmptyInput("no power traces")
    starts, ends = zip(*(trace.span for trace in traces))
    return max(starts), min(ends)
