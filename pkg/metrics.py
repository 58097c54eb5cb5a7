"""
Derived metrics: throughput per watt, electricity cost and operational carbon
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from errors import KindMismatch, MetricsError, RateCoverageGap, ZeroPower
from meter import merge_energy, numbered_lines

logger = logging.getLogger(__name__)

JOULES_PER_KWH = 3.6e6


class RateKind(Enum):
    PRICE = "price_usd_per_kwh"
    CARBON = "carbon_g_per_kwh"


@dataclass(frozen=True)
class RateSeries:
    """Piecewise-constant, right-continuous rate; the last rate holds until `end`"""
    kind: RateKind
    starts: tuple
    rates: tuple
    region: str = ""
    end: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "starts", tuple(float(t) for t in self.starts))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if not self.starts or len(self.starts) != len(self.rates):
            raise MetricsError("a rate series needs one rate per breakpoint and at least one breakpoint")
        if any(b <= a for a, b in zip(self.starts, self.starts[1:])):
            raise MetricsError("rate breakpoints must be strictly increasing")
        if any(r < 0 or not math.isfinite(r) for r in self.rates):
            raise MetricsError("rates must be finite and >= 0")
        if self.end is not None and self.end <= self.starts[-1]:
            raise MetricsError("series end must follow the last breakpoint")

    @classmethod
    def flat(cls, kind, rate, region=""):
        return cls(kind, (0.0,), (rate,), region)

    def rate_at(self, t):
        index = int(np.searchsorted(self.starts, t, side="right")) - 1
        if index < 0 or (self.end is not None and t >= self.end):
            raise RateCoverageGap(f"{self.kind.value} series does not cover t={t!r}")
        return self.rates[index]

    def pieces(self, t0, t1):
        """Yield (a, b, rate) covering [t0, t1] split at the breakpoints"""
        if t0 < self.starts[0] or (self.end is not None and t1 > self.end):
            covered = (self.starts[0], self.end if self.end is not None else math.inf)
            raise RateCoverageGap(
                f"{self.kind.value} series covers [{covered[0]:.6g}, {covered[1]:.6g}], "
                f"energy window is [{t0:.6g}, {t1:.6g}]"
            )
        cuts = [t for t in self.starts if t0 < t < t1]
        edges = [t0] + cuts + [t1]
        for a, b in zip(edges, edges[1:]):
            yield a, b, self.rate_at(a)


@dataclass(frozen=True)
class EnergySegment:
    """Energy drawn uniformly over [t_start, t_end]"""
    t_start: float
    t_end: float
    energy_j: float

    @property
    def instantaneous(self):
        return self.t_end == self.t_start

    def energy_between(self, a, b):
        # an instant belongs to the half-open [a, b) so adjacent windows never share it
        if self.instantaneous:
            return self.energy_j if a <= self.t_start < b else 0.0
        lo, hi = max(a, self.t_start), min(b, self.t_end)
        if hi <= lo:
            return 0.0
        return self.energy_j * (hi - lo) / (self.t_end - self.t_start)


@dataclass(frozen=True)
class TraceWindow:
    """Power traces restricted to [t0, t1]"""
    traces: tuple
    t0: float
    t1: float

    def energy_between(self, a, b):
        lo, hi = max(a, self.t0), min(b, self.t1)
        if hi <= lo:
            return 0.0
        return merge_energy(self.traces, lo, hi)


def _span(source):
    if isinstance(source, TraceWindow):
        return [source], source.t0, source.t1
    segments = list(source)
    if not segments:
        return [], 0.0, 0.0
    return segments, min(s.t_start for s in segments), max(s.t_end for s in segments)


def _rate_integral(source, series: RateSeries, kind: RateKind, offset_s):
    if series.kind is not kind:
        raise KindMismatch(f"expected a {kind.value} series, got {series.kind.value}")
    parts, t0, t1 = _span(source)
    instants = [p for p in parts if isinstance(p, EnergySegment) and p.instantaneous]
    spread = [p for p in parts if not (isinstance(p, EnergySegment) and p.instantaneous)]
    total = [p.energy_j / JOULES_PER_KWH * series.rate_at(p.t_start + offset_s) for p in instants]
    if spread and t1 > t0:
        for a, b, rate in series.pieces(t0 + offset_s, t1 + offset_s):
            energy = math.fsum(p.energy_between(a - offset_s, b - offset_s) for p in spread)
            total.append(energy / JOULES_PER_KWH * rate)
    return math.fsum(total)


def electricity_cost(source, rates: RateSeries, offset_s=0.0):
    """USD for the energy in `source` (EnergySegments or a TraceWindow)

    Run time t maps to series time t + offset_s.
    """
    return _rate_integral(source, rates, RateKind.PRICE, offset_s)


def carbon_emissions(source, intensity: RateSeries, offset_s=0.0):
    """Grams of CO2e for the energy in `source`"""
    return _rate_integral(source, intensity, RateKind.CARBON, offset_s)


def throughput_per_watt(result):
    """Tokens/s/W for LLM results, requests/s/W for diffusion"""
    if not result.avg_power_w > 0:
        raise ZeroPower(f"run {result.config_id} has no average power")
    return result.throughput / result.avg_power_w


def load_rate_series(path, kind=None):
    """Read a JSONL rate file (header line first) or a t_start,rate CSV"""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        if kind is None:
            raise MetricsError(f"{path}: CSV rate files need an explicit kind")
        try:
            table = pd.read_csv(path)
        except (UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as err:
            raise MetricsError(f"{path}: unreadable rate table ({err})") from err
        if not {"t_start", "rate"} <= set(table.columns):
            raise MetricsError(f"{path}: CSV rate files need t_start and rate columns")
        table = table.sort_values("t_start")
        return RateSeries(RateKind(kind), table["t_start"].tolist(), table["rate"].tolist())

    header = {}
    starts, rates = [], []
    with open(path, "rb") as fp:
        for line_no, line in numbered_lines(fp, MetricsError):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as err:
                raise MetricsError(f"{path}:{line_no}: not JSON ({err.msg})") from err
            if "kind" in entry:
                header = entry
                continue
            try:
                starts.append(float(entry["t_start"]))
                rates.append(float(entry["rate"]))
            except (KeyError, TypeError, ValueError) as err:
                raise MetricsError(f"{path}:{line_no}: rate entries need t_start and rate") from err
    declared = header.get("kind", kind)
    if declared is None:
        raise MetricsError(f"{path}: no kind header")
    if kind is not None and declared != RateKind(kind).value:
        raise KindMismatch(f"{path} holds {declared} rates, expected {RateKind(kind).value}")
    try:
        rate_kind = RateKind(declared)
    except ValueError as err:
        raise MetricsError(f"{path}: unknown rate kind {declared!r}") from err
    return RateSeries(rate_kind, starts, rates, header.get("region", ""), header.get("t_end"))
