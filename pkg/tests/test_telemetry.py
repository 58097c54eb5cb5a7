import io
import json
import random

import pytest

from conftest import decode, llm_record
from errors import (
    DuplicateLifecycle,
    EmptyInput,
    MalformedEvent,
    MalformedRecord,
    MissingFirstToken,
    OrphanEvent,
    OverlappingIterations,
)
from telemetry import (
    BatchGroup,
    IterationLog,
    Phase,
    PreemptionEvent,
    PreemptionMode,
    RequestRecord,
    ServingLog,
    batch_timeline,
    format_serving_log,
    latency_metrics,
    output_length_stats,
    parse_serving_log,
    read_serving_log,
)


def events(*items):
    return io.StringIO("\n".join(json.dumps(e) for e in items) + "\n")


def test_lifecycle_join():
    log = parse_serving_log(events(
        {"type": "request_submit", "id": "r1", "t": 0.0, "input_tokens": 512},
        {"type": "first_token", "id": "r1", "t": 1.0},
        {"type": "request_complete", "id": "r1", "t": 5.0, "output_tokens": 200},
    ))
    records, iterations = log
    assert iterations == []
    (record,) = records
    assert record.input_tokens == 512
    assert record.output_tokens == 200
    assert record.complete_t - record.submit_t == 5.0


def test_orphan_complete():
    with pytest.raises(OrphanEvent):
        parse_serving_log(events({"type": "request_complete", "id": "ghost", "t": 1.0, "output_tokens": 3}))


def test_duplicate_submit():
    with pytest.raises(DuplicateLifecycle):
        parse_serving_log(events(
            {"type": "request_submit", "id": "r1", "t": 0.0},
            {"type": "request_submit", "id": "r1", "t": 0.5},
        ))


def test_incomplete_requests_reported(caplog):
    log = parse_serving_log(events(
        {"type": "request_submit", "id": "a", "t": 0.0},
        {"type": "request_submit", "id": "b", "t": 0.0},
        {"type": "request_submit", "id": "c", "t": 0.0},
        {"type": "first_token", "id": "a", "t": 0.1},
        {"type": "first_token", "id": "b", "t": 0.1},
        {"type": "request_complete", "id": "a", "t": 1.0, "output_tokens": 4},
        {"type": "request_complete", "id": "b", "t": 2.0, "output_tokens": 4},
    ))
    assert [r.request_id for r in log.records] == ["a", "b"]
    assert log.incomplete == ["c"]
    assert "incomplete" in caplog.text


@pytest.mark.parametrize("line", [
    {"type": "iteration", "t_start": 1.0, "t_end": 1.0, "batch_size": 1, "tokens_emitted": 1, "phase": "decode"},
    {"type": "iteration", "t_start": 0.0, "t_end": 1.0, "batch_size": 1, "tokens_emitted": 1, "phase": "warp"},
    {"type": "launch", "id": "r1", "t": 0.0},
    {"type": "request_submit", "t": 0.0},
])
def test_malformed_events(line):
    with pytest.raises(MalformedRecord):
        parse_serving_log(events(line))


def test_completion_without_output_tokens_rejected():
    with pytest.raises(MalformedRecord):
        parse_serving_log(events(
            {"type": "request_submit", "id": "r1", "t": 0.0},
            {"type": "request_complete", "id": "r1", "t": 1.0, "output_tokens": 0},
        ))


def test_preemptions_and_batches_parsed():
    log = parse_serving_log(events(
        {"type": "request_submit", "id": "r1", "t": 0.0},
        {"type": "preemption", "id": "r1", "t": 0.2, "mode": "swap"},
        {"type": "preemption", "id": "r1", "t": 0.4, "mode": "swap"},
        {"type": "request_complete", "id": "r1", "t": 1.0, "output_tokens": 0, "batch_id": "b0"},
        {"type": "batch", "batch_id": "b0", "t_start": 0.0, "t_end": 1.0, "size": 1, "request_ids": ["r1"]},
    ))
    assert log.records[0].preemptions == 2
    assert log.preemptions[0] == PreemptionEvent("r1", 0.2, PreemptionMode.SWAP)
    assert log.batches == [BatchGroup("b0", 0.0, 1.0, 1, ("r1",))]
    assert log.records[0].is_diffusion


def test_format_then_parse_preserves_log():
    log = ServingLog(
        records=[
            RequestRecord("r1", 0.0, 2.0, input_tokens=10, output_tokens=5, first_token_t=0.5, preemptions=1),
            RequestRecord("r2", 0.0, 3.0, input_tokens=7, output_tokens=9, first_token_t=0.25),
        ],
        iterations=[
            IterationLog(0.0, 0.25, 2, 0, Phase.PREFILL),
            IterationLog(0.25, 0.5, 2, 2, Phase.DECODE),
        ],
        preemptions=[
            PreemptionEvent("r3", 0.2, PreemptionMode.SWAP),
            PreemptionEvent("r1", 1.0, PreemptionMode.RECOMPUTE),
        ],
        incomplete=["r3", "r4"],
        incomplete_submit_t={"r3": 0.1},
    )
    parsed = parse_serving_log(format_serving_log(log))
    assert parsed.records == log.records
    assert parsed.iterations == log.iterations
    assert parsed.preemptions == log.preemptions
    # r4 has no known submit time and is written at the start of the log
    assert sorted(parsed.incomplete) == ["r3", "r4"]
    assert parsed.incomplete_submit_t == {"r3": 0.1, "r4": 0.0}


def test_log_with_invalid_utf8_is_malformed(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_bytes(b'{"type": "request_submit", "id": "r\xff", "t": 0.0}\n')
    with pytest.raises(MalformedEvent, match="line 1"):
        read_serving_log(path)


def test_timeline_breakpoints():
    timeline = batch_timeline([decode(0.0, 1.0, 4), decode(1.0, 2.0, 8)])
    assert timeline.breakpoints == ((0.0, 4), (1.0, 8), (2.0, 0))
    assert timeline.run_span == (0.0, 2.0)


def test_timeline_empty(caplog):
    timeline = batch_timeline([])
    assert timeline.is_empty
    assert timeline.run_span == (0.0, 0.0)
    assert "empty" in caplog.text


def test_timeline_gap_is_zero():
    timeline = batch_timeline([decode(0.0, 2.0, 3), decode(3.0, 4.0, 3)])
    assert timeline.value_at(2.5) == 0
    assert timeline.value_at(3.0) == 3
    assert timeline.breakpoints == ((0.0, 3), (2.0, 0), (3.0, 3), (4.0, 0))


def test_timeline_coalesces_equal_values():
    timeline = batch_timeline([decode(0.0, 1.0, 4), decode(1.0, 2.0, 4)])
    assert timeline.breakpoints == ((0.0, 4), (2.0, 0))


def test_timeline_overlap():
    with pytest.raises(OverlappingIterations):
        batch_timeline([decode(0.0, 1.0, 4), decode(0.5, 2.0, 4)])


def test_timeline_integral_matches_iterations():
    iterations = [decode(0.0, 0.5, 3), decode(0.5, 1.25, 7), decode(2.0, 2.5, 2)]
    timeline = batch_timeline(iterations)
    expected = sum(it.batch_size * it.duration for it in iterations)
    assert timeline.integral() == pytest.approx(expected, rel=1e-12)


def test_tpot_divides_by_gaps():
    summary = latency_metrics([llm_record("r1", 201, submit=0.0, first=1.0, complete=5.0)])
    assert summary.tpot["r1"] == pytest.approx(0.020)
    assert summary.ttft["r1"] == pytest.approx(1.0)
    assert summary.mean_e2e == pytest.approx(5.0)


def test_tpot_single_token_clamps_divisor():
    summary = latency_metrics([llm_record("r1", 1, first=1.0, complete=1.5)])
    assert summary.tpot["r1"] == pytest.approx(0.5)


def test_mean_tpot():
    records = [
        llm_record("a", 11, first=0.0, complete=0.1),
        llm_record("b", 11, first=0.0, complete=0.3),
    ]
    assert latency_metrics(records).mean_tpot == pytest.approx(0.020)


def test_latency_permutation_invariant():
    records = [llm_record(f"r{k}", k + 2, first=0.1 * k, complete=1.0 + k) for k in range(20)]
    shuffled = records[:]
    random.Random(4).shuffle(shuffled)
    assert latency_metrics(records) == latency_metrics(shuffled)


def test_latency_errors():
    with pytest.raises(EmptyInput):
        latency_metrics([])
    record = RequestRecord("r1", 0.0, 1.0, output_tokens=3)
    with pytest.raises(MissingFirstToken):
        latency_metrics([record])


def test_diffusion_latency():
    summary = latency_metrics([RequestRecord("img", 0.0, 4.0, batch_id="b0")])
    assert summary.ttft["img"] == 4.0
    assert summary.tpot["img"] == 0.0


def test_output_length_stats():
    records = [llm_record("a", 10), llm_record("b", 30), llm_record("c", 20)]
    assert output_length_stats(records) == {"mean": 20.0, "median": 20.0, "max": 30}
