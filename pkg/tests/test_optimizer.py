import math

import numpy as np
import pytest

from errors import EmptyInput, NoFeasiblePoint, NonFiniteCoordinate, OptimizerError
from optimizer import (
    ParetoPoint,
    default_metric,
    dominates,
    pareto_frontier,
    points_from_results,
    recommend,
)
from sweep import BenchmarkConfig, RunResult, Task


def point(latency, energy, name=None):
    return ParetoPoint(name or f"c{latency}-{energy}", latency, energy)


def coordinates(points):
    return [(p.latency, p.energy) for p in points]


def random_points(rng, n):
    # integer grid so duplicates and ties show up
    return [
        point(float(lat), float(en), f"p{k:03d}")
        for k, (lat, en) in enumerate(zip(rng.integers(1, 30, n), rng.integers(1, 30, n)))
    ]


def brute_force_frontier(points):
    return {p.config_id for p in points if not any(dominates(q, p) for q in points)}


def test_dominated_point_dropped():
    frontier = pareto_frontier([point(1, 10), point(2, 5), point(3, 6)])
    assert coordinates(frontier) == [(1, 10), (2, 5)]


def test_single_point():
    only = point(1.5, 3.0)
    assert pareto_frontier([only]) == [only]


def test_duplicates_retained_and_ordered():
    frontier = pareto_frontier([point(2, 5, "b"), point(2, 5, "a"), point(1, 9, "z")])
    assert [p.config_id for p in frontier] == ["z", "a", "b"]


def test_equal_latency_keeps_cheapest_only():
    frontier = pareto_frontier([point(1, 9, "x"), point(1, 7, "y"), point(4, 7, "w")])
    assert [p.config_id for p in frontier] == ["y"]


def test_frontier_matches_brute_force():
    rng = np.random.default_rng(21)
    for _ in range(300):
        points = random_points(rng, int(rng.integers(1, 60)))
        assert {p.config_id for p in pareto_frontier(points)} == brute_force_frontier(points)
    points = random_points(rng, 500)
    assert {p.config_id for p in pareto_frontier(points)} == brute_force_frontier(points)


def test_frontier_rejects_bad_input():
    with pytest.raises(EmptyInput):
        pareto_frontier([])
    with pytest.raises(NonFiniteCoordinate):
        pareto_frontier([point(1, 2), point(math.nan, 1)])
    with pytest.raises(NonFiniteCoordinate):
        pareto_frontier([point(math.inf, 1)])
    with pytest.raises(OptimizerError):
        pareto_frontier([point(0.0, 1)])


def test_chat_savings_example():
    # min-latency baseline costs 1/0.56 of the 77 ms point
    points = [
        point(0.050, 100.0 / 0.56, "fastest"),
        point(0.077, 100.0, "chosen"),
        point(0.090, 130.0, "worse"),
        point(0.140, 60.0, "too-slow"),
    ]
    rec = recommend(points, "tpot", 0.100)
    assert rec.chosen.config_id == "chosen"
    assert rec.chosen.latency == 0.077
    assert rec.baseline.config_id == "fastest"
    assert rec.savings_fraction == pytest.approx(0.44, abs=1e-9)


def test_diffusion_savings_example():
    points = [point(2.0, 100.0, "fastest"), point(3.63, 79.0, "chosen"), point(6.0, 50.0, "slow")]
    rec = recommend(points, "e2e", 5.0)
    assert rec.chosen.latency == 3.63
    assert rec.savings_fraction == pytest.approx(0.21, abs=1e-9)


def test_infeasible_target():
    with pytest.raises(NoFeasiblePoint) as info:
        recommend([point(0.05, 10.0), point(0.08, 5.0)], "tpot", 0.001)
    assert info.value.min_latency == 0.05
    assert "0.05" in str(info.value)


def test_target_must_be_positive():
    with pytest.raises(OptimizerError):
        recommend([point(1, 1)], "e2e", 0.0)


def test_single_point_recommendation():
    rec = recommend([point(0.2, 4.0, "solo")], "tpot", 1.0)
    assert rec.chosen == rec.baseline
    assert rec.savings_fraction == 0.0


def test_tie_breaking():
    points = [point(3, 5, "b"), point(2, 5, "c"), point(2, 5, "a"), point(1, 8, "base")]
    assert recommend(points, "e2e", 10).chosen.config_id == "a"


def test_recommendation_properties():
    rng = np.random.default_rng(5)
    for _ in range(200):
        points = random_points(rng, int(rng.integers(1, 40)))
        fastest = min(p.latency for p in points)
        targets = sorted(rng.uniform(fastest, 35.0, 4))
        chosen = [recommend(points, "e2e", t) for t in targets]
        energies = [rec.chosen.energy for rec in chosen]
        assert energies == sorted(energies, reverse=True)
        frontier = pareto_frontier(points)
        for target, rec in zip(targets, chosen):
            assert rec.chosen.latency <= target
            assert rec.savings_fraction >= 0
            assert rec.chosen in frontier
            assert recommend(frontier, "e2e", target).chosen == rec.chosen
            scaled = [ParetoPoint(p.config_id, p.latency, p.energy * 3.7) for p in points]
            again = recommend(scaled, "e2e", target)
            assert again.chosen.config_id == rec.chosen.config_id
            assert again.baseline.config_id == rec.baseline.config_id
            assert again.savings_fraction == pytest.approx(rec.savings_fraction, abs=1e-12)


def test_recommendation_document():
    doc = recommend([point(1, 4, "a"), point(2, 2, "b")], "e2e", 3).to_document()
    assert doc["chosen_config"] == "b"
    assert doc["baseline_config"] == "a"
    assert doc["savings_fraction"] == pytest.approx(0.5)
    assert doc["latency_statistic"] == "mean"
    assert set(doc) >= {"metric", "target", "achieved_latency", "energy"}


def test_points_from_results_mixes_profiles():
    def result(batch, profile, tpot, energy, status="ok"):
        config = BenchmarkConfig(Task.CHAT, device_profile=profile, max_batch_size=batch)
        return RunResult(config, status=status, mean_tpot_s=tpot, energy_per_request_j=energy)

    results = [
        result(8, "hi-tdp", 0.03, 40.0),
        result(8, "mid-tdp", 0.05, 30.0),
        result(16, "mid-tdp", 0.0, 0.0, status="failed"),
    ]
    points = points_from_results(results, "tpot")
    assert [p.label for p in points] == ["hi-tdp", "mid-tdp"]
    assert {p.label for p in pareto_frontier(points)} == {"hi-tdp", "mid-tdp"}
    with pytest.raises(OptimizerError):
        points_from_results(results, "p99")


def test_default_metric():
    assert default_metric(Task.CHAT) == "tpot"
    assert default_metric(Task.CODE) == "e2e"
    assert default_metric(Task.T2I) == "e2e"
