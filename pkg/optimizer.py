"""
Time-energy Pareto frontier and latency-constrained recommendations
"""

import logging
import math
from dataclasses import dataclass

from errors import EmptyInput, NoFeasiblePoint, NonFiniteCoordinate, OptimizerError

logger = logging.getLogger(__name__)

# Latency metric name -> RunResult field
LATENCY_METRICS = {
    "tpot": "mean_tpot_s",
    "ttft": "mean_ttft_s",
    "e2e": "mean_e2e_s",
}


@dataclass(frozen=True)
class ParetoPoint:
    config_id: str
    latency: float
    energy: float
    label: str = ""


@dataclass(frozen=True)
class Recommendation:
    chosen: ParetoPoint
    metric: str
    target: float
    baseline: ParetoPoint
    savings_fraction: float
    latency_statistic: str = "mean"

    def to_document(self):
        return {
            "metric": self.metric,
            "latency_statistic": self.latency_statistic,
            "target": self.target,
            "chosen_config": self.chosen.config_id,
            "achieved_latency": self.chosen.latency,
            "energy": self.chosen.energy,
            "baseline_config": self.baseline.config_id,
            "baseline_latency": self.baseline.latency,
            "baseline_energy": self.baseline.energy,
            "savings_fraction": self.savings_fraction,
        }


def default_metric(task):
    """TPOT for chat; whole-response latency for code and diffusion"""
    return "tpot" if getattr(task, "value", task) == "chat" else "e2e"


def points_from_results(results, metric):
    if metric not in LATENCY_METRICS:
        raise OptimizerError(f"unknown latency metric {metric!r} (known: {', '.join(LATENCY_METRICS)})")
    attribute = LATENCY_METRICS[metric]
    return [
        ParetoPoint(r.config_id, getattr(r, attribute), r.energy_per_request_j, r.config.device_profile)
        for r in results
        if r.ok
    ]


def _check(points):
    points = list(points)
    if not points:
        raise EmptyInput("no points to optimize over")
    for p in points:
        if not (math.isfinite(p.latency) and math.isfinite(p.energy)):
            raise NonFiniteCoordinate(f"point {p.config_id} has non-finite coordinates ({p.latency}, {p.energy})")
        if p.latency <= 0 or p.energy <= 0:
            raise OptimizerError(f"point {p.config_id} needs positive latency and energy")
    return points


def dominates(p: ParetoPoint, q: ParetoPoint):
    return p.latency <= q.latency and p.energy <= q.energy and (p.latency < q.latency or p.energy < q.energy)


def pareto_frontier(points):
    """Every point no other point dominates, sorted by latency then config_id

    Points with identical coordinates are all kept.
    """
    points = sorted(_check(points), key=lambda p: (p.latency, p.energy, p.config_id))
    frontier = []
    best_faster = math.inf
    i = 0
    while i < len(points):
        j = i
        while j < len(points) and points[j].latency == points[i].latency:
            j += 1
        group_best = points[i].energy
        if group_best < best_faster:
            frontier.extend(p for p in points[i:j] if p.energy == group_best)
            best_faster = group_best
        i = j
    return sorted(frontier, key=lambda p: (p.latency, p.config_id))


def recommend(points, metric_name, target):
    """Minimum-energy point with latency <= target and its savings over the fastest point"""
    points = _check(points)
    if not target > 0:
        raise OptimizerError(f"latency target must be positive, got {target!r}")
    baseline = min(points, key=lambda p: (p.latency, p.energy, p.config_id))
    feasible = [p for p in points if p.latency <= target]
    if not feasible:
        raise NoFeasiblePoint(target, baseline.latency)
    chosen = min(feasible, key=lambda p: (p.energy, p.latency, p.config_id))
    savings = 1.0 - chosen.energy / baseline.energy
    logger.info("chose %s at %.6g s, %.1f%% below %s", chosen.config_id, chosen.latency, 100 * savings,
                baseline.config_id)
    return Recommendation(chosen, metric_name, target, baseline, savings)
