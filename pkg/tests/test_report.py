import io

import pandas as pd
import pytest

from errors import EmptyInput, UnsupportedFormat
from metrics import JOULES_PER_KWH, RateKind, RateSeries
from optimizer import points_from_results
from report import FILE_NAMES, build_report, render_csv, render_markdown, render_svg, write_report
from sweep import BenchmarkConfig, RunResult, Task

# (batch, profile, tpot, energy)
RUNS = [
    (4, "hi-tdp", 0.020, 90.0),
    (8, "hi-tdp", 0.025, 60.0),
    (16, "hi-tdp", 0.040, 45.0),
    (8, "mid-tdp", 0.030, 70.0),
    (16, "mid-tdp", 0.060, 40.0),
]


def sample_results():
    results = [
        RunResult(
            BenchmarkConfig(Task.CHAT, device_profile=profile, max_batch_size=batch),
            energy_per_request_j=energy,
            energy_per_token_j=energy / 100,
            mean_tpot_s=tpot,
            mean_ttft_s=0.1,
            mean_e2e_s=2.5,
            throughput=500.0,
            avg_power_w=250.0,
            total_energy_j=JOULES_PER_KWH,
            method="steady-state",
            num_requests=64,
            output_tokens={"mean": 100.0, "median": 90.0, "max": 400},
            run_span=(0.0, 3600.0),
        )
        for batch, profile, tpot, energy in RUNS
    ]
    results.append(RunResult.failed(BenchmarkConfig(Task.CHAT, max_batch_size=64), "never saturated"))
    return results


def test_csv_has_one_row_per_run():
    table = pd.read_csv(io.StringIO(render_csv(build_report(sample_results()))))
    assert len(table) == 6
    assert list(table["config_id"]) == sorted(table["config_id"])
    assert table["on_frontier"].sum() == 4
    assert table.loc[table["status"] == "failed", "error"].tolist() == ["never saturated"]


def test_throughput_per_watt_column():
    table = pd.read_csv(io.StringIO(render_csv(build_report(sample_results()))))
    ok = table[table["status"] == "ok"]
    assert ok["throughput_per_watt"].tolist() == pytest.approx([2.0] * 5)


def test_cost_and_carbon_columns():
    bundle = build_report(
        sample_results(),
        price_rates=RateSeries.flat(RateKind.PRICE, 0.10),
        carbon_rates=RateSeries.flat(RateKind.CARBON, 400.0),
    )
    ok_rows = [row for row in bundle.rows if row["status"] == "ok"]
    assert all(row["cost_usd"] == pytest.approx(0.10) for row in ok_rows)
    assert all(row["carbon_g"] == pytest.approx(400.0) for row in ok_rows)


def test_recommendation_in_markdown():
    bundle = build_report(sample_results(), metric="tpot", target=0.030)
    assert bundle.recommendation.chosen.energy == 60.0
    assert bundle.recommendation.savings_fraction == pytest.approx(1 - 60.0 / 90.0)
    text = render_markdown(bundle)
    assert "## Recommendation" in text
    assert text.count("\n| ") == 7


def test_infeasible_target_is_only_a_warning(caplog):
    bundle = build_report(sample_results(), metric="tpot", target=0.001)
    assert bundle.recommendation is None
    assert "minimum achievable latency" in caplog.text


def test_default_metric_follows_task():
    assert build_report(sample_results()).metric == "tpot"


def test_rejects_bad_input():
    with pytest.raises(EmptyInput):
        build_report([])
    with pytest.raises(UnsupportedFormat):
        build_report(sample_results(), formats=("csv", "pdf"))


def test_all_failed_runs_still_report():
    bundle = build_report([RunResult.failed(BenchmarkConfig(Task.CHAT), "boom")])
    assert bundle.frontier == []
    assert len(bundle.rows) == 1


def test_svg_markers_and_frontier():
    pytest.importorskip("PyQt5.QtSvg")
    results = sample_results()
    bundle = build_report(results, formats=("svg",))
    svg = render_svg(bundle, points_from_results(results, bundle.metric))
    assert svg.count("<ellipse") == 5
    assert svg.count("<polyline") == 1
    assert "hi-tdp" in svg and "mid-tdp" in svg


def test_write_report(tmp_path):
    results = sample_results()
    bundle = build_report(results, formats=("csv", "md"))
    written = write_report(bundle, tmp_path / "report", results)
    assert [p.name for p in written] == [FILE_NAMES["csv"], FILE_NAMES["md"]]
    assert all(p.read_text().endswith("\n") for p in written)
