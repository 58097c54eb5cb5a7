"""
Command-line entry point: run, analyze, recommend, report, simulate, synth-dataset
"""

import argparse
import json
import logging
import math
import os
import re
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

from accounting import SteadyParams, account_diffusion_run, account_llm_run, tdp_overestimate_ratio
from backends import make_backend
from errors import (
    BenchError,
    EmptyInput,
    InfeasibleConfig,
    InvalidDistributionParams,
    MeterError,
    MetricsError,
    NoFeasiblePoint,
    ReportError,
    SpecError,
    StoreError,
    TelemetryError,
)
from meter import TraceKind, common_span, load_power_traces, write_power_trace
from metrics import RateKind, load_rate_series
from optimizer import LATENCY_METRICS, default_metric, points_from_results, recommend
from profiles import ProfileCache
from report import build_report, write_report
from simulator import (
    SimConfig,
    WorkloadSpec,
    diffusion_workload,
    read_workload,
    simulate,
    synth_workload,
    write_ledger,
    write_workload,
)
from sweep import build_workload, expand_grid, load_results, load_sweep_spec, persist_results, run_sweep
from telemetry import PreemptionMode, latency_metrics, output_length_stats, read_serving_log, write_serving_log

logger = logging.getLogger(__name__)

STORE_ENV = "JOULEBENCH_STORE"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_SPEC = 2
EXIT_INFEASIBLE = 3
EXIT_EMPTY = 4

console = Console(highlight=False, soft_wrap=True)

_LATENCY = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(ms|s)?\s*$")


def parse_latency(text):
    """Seconds from '0.1', '100ms' or '2s'"""
    match = _LATENCY.match(str(text))
    if not match:
        raise argparse.ArgumentTypeError(f"not a latency: {text!r} (use e.g. 0.1, 100ms or 2s)")
    value = float(match.group(1))
    return value / 1000.0 if match.group(2) == "ms" else value


def rounded(value):
    """Round every float to 6 significant digits for printing"""
    if isinstance(value, float):
        return value if not math.isfinite(value) or value == 0 else float(f"{value:.6g}")
    if isinstance(value, dict):
        return {k: rounded(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [rounded(v) for v in value]
    return value


def emit(document):
    print(json.dumps(rounded(document), indent=2, sort_keys=True))


def configure_logging(verbosity):
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    root = logging.getLogger()
    root.setLevel(level)
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        root.addHandler(RichHandler(console=Console(stderr=True), show_time=False, show_path=False))


def _params(args):
    return SteadyParams(
        gap_tolerance_s=args.gap_tolerance,
        min_fraction=args.min_fraction,
        allow_unsaturated=args.allow_unsaturated,
        decode_only=args.decode_only,
    )


def cmd_run(args):
    spec = load_sweep_spec(args.spec)
    configs = expand_grid(spec)
    if args.dry_run:
        for config in configs:
            print(json.dumps({"config_id": config.config_id, **config.to_dict()}, sort_keys=True))
        return EXIT_OK

    backend = make_backend(spec.backend, args.seed)
    workload = build_workload(spec, args.seed)
    store = Path(args.store)

    def progress(index, total, result):
        if result.ok:
            console.print(
                f"{index}/{total} {result.config_id} ok "
                f"energy_per_request_j={result.energy_per_request_j:.6g}",
                markup=False,
            )
        else:
            console.print(f"{index}/{total} {result.config_id} FAILED {result.error}", markup=False, style="red")

    results = run_sweep(configs, backend, workload, spec.accounting, spec.repetitions,
                        artifacts_dir=store / "runs", progress=progress)
    if results:
        persist_results(results, store)
    failed = sum(1 for r in results if not r.ok)
    console.print(f"{len(results) - failed} ok, {failed} failed; results in {store}", markup=False)
    if failed and args.strict:
        return EXIT_INTERNAL
    return EXIT_OK


def cmd_analyze(args):
    traces = load_power_traces(args.trace, args.clock_origin)
    log = read_serving_log(args.log)
    trace_list = list(traces.values())
    if log.batches:
        account = account_diffusion_run(trace_list, log)
    else:
        if args.max_batch_size is None:
            raise SpecError("--max-batch-size is required for LLM serving logs")
        account = account_llm_run(trace_list, log, args.max_batch_size, _params(args))
    latency = latency_metrics(log.records)
    document = {
        "method": account.method.value,
        "energy_per_request_j": account.energy_per_request,
        "energy_per_token_j": account.energy_per_token,
        "flags": list(account.flags),
        "num_requests": len(log.records),
        "incomplete_requests": len(log.incomplete),
        "mean_ttft_s": latency.mean_ttft,
        "mean_tpot_s": latency.mean_tpot,
        "mean_e2e_s": latency.mean_e2e,
        "output_tokens": output_length_stats(log.records),
    }
    if account.window is not None:
        w = account.window
        document["steady_window"] = {
            "t0": w.t0, "t1": w.t1, "saturation_fraction": w.saturation_fraction,
            "tokens_steady": w.tokens_steady, "energy_steady_j": w.energy_steady, "steady": w.steady,
        }
    if account.batch_energy:
        document["batch_energy_j"] = dict(sorted(account.batch_energy.items()))
    tdp_w = args.tdp_w or next(iter(traces.values())).declared_max_power
    if tdp_w:
        first, last = log.span
        trace_first, trace_last = common_span(trace_list)
        ratio = tdp_overestimate_ratio(trace_list, max(first, trace_first), min(last, trace_last),
                                       tdp_w, len(trace_list))
        document["tdp_ratio"] = ratio
        document["tdp_energy_per_request_j"] = account.energy_per_request * ratio
    if args.per_request:
        document["per_request_energy_j"] = dict(sorted(account.per_request_energy.items()))
    emit(document)
    return EXIT_OK


def _ok_results(store):
    results = [r for r in load_results(store) if r.ok]
    if not results:
        raise EmptyInput(f"no successful runs in store {store}")
    return results


def cmd_recommend(args):
    results = _ok_results(args.store)
    metric = args.metric or default_metric(results[0].config.task)
    points = points_from_results(results, metric)
    try:
        recommendation = recommend(points, metric, args.target)
    except NoFeasiblePoint as err:
        logger.error("%s", err)
        emit({"error": "no-feasible-point", "metric": metric, "target": err.target, "min_latency": err.min_latency})
        return EXIT_INFEASIBLE
    emit(recommendation.to_document())
    return EXIT_OK


def cmd_report(args):
    results = load_results(args.store)
    if not results:
        raise EmptyInput(f"results store {args.store} is empty")
    price = load_rate_series(args.price_rates, RateKind.PRICE) if args.price_rates else None
    carbon = load_rate_series(args.carbon_rates, RateKind.CARBON) if args.carbon_rates else None
    bundle = build_report(results, args.metric, args.target, price, carbon, args.rate_offset, tuple(args.format))
    out_dir = Path(args.out) if args.out else Path(args.store) / "report"
    for path in write_report(bundle, out_dir, results):
        console.print(f"wrote {path}", markup=False)
    return EXIT_OK


def cmd_simulate(args):
    profile = ProfileCache.get(args.profile)
    if args.dataset:
        workload = read_workload(args.dataset)
    elif args.steps is not None:
        workload = diffusion_workload(args.n_requests, args.steps, args.resolution)
    else:
        workload = synth_workload(
            WorkloadSpec(args.n_requests, args.input_mean, args.alpha, args.output_mean), args.seed
        )
    kv_budget = args.kv_budget if args.kv_budget is not None else profile.kv_budget_tokens * args.tp
    config = SimConfig(
        max_batch_size=args.max_batch_size,
        tp_degree=args.tp,
        kv_budget_tokens=kv_budget,
        kv_tokens_per_request_token=profile.kv_tokens_per_request_token,
        preemption_mode=PreemptionMode(args.preemption_mode),
        swap_bandwidth=profile.swap_bandwidth,
        sampling_interval_s=args.sampling_interval,
        seed=args.seed,
        trace_kind=TraceKind(args.trace_kind),
    )
    result = simulate(config, workload, profile.latency, profile.power)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_power_trace(out / "trace.jsonl", result.traces.values(), result.clock_origin, result.tdp_w)
    write_serving_log(out / "log.jsonl", result.log)
    write_ledger(out / "ledger.jsonl", result.ledger)
    t0, t1 = result.span
    emit({
        "profile": profile.name,
        "requests": len(workload),
        "iterations": len(result.log.iterations),
        "preemptions": len(result.log.preemptions),
        "span_s": [t0, t1],
        "ledger_energy_j": math.fsum(e.energy_j for e in result.ledger),
        "files": ["trace.jsonl", "log.jsonl", "ledger.jsonl"],
    })
    return EXIT_OK


def cmd_synth_dataset(args):
    workload = synth_workload(
        WorkloadSpec(args.n_requests, args.input_mean, args.alpha, args.output_mean), args.seed
    )
    write_workload(args.out, workload)
    console.print(f"wrote {len(workload)} requests to {args.out}", markup=False)
    return EXIT_OK


def _accounting_flags(parser):
    parser.add_argument("--gap-tolerance", type=float, default=None,
                        help="Merge saturated stretches closer than this many seconds (default: 1%% of the run)")
    parser.add_argument("--min-fraction", type=float, default=0.10,
                        help="Minimum steady window length as a fraction of the run (default: 0.10)")
    parser.add_argument("--allow-unsaturated", action="store_true",
                        help="Fall back to the central half of the run when the batch never saturates")
    parser.add_argument("--decode-only", action="store_true",
                        help="Count only decode iteration energy in the steady window")


def _workload_flags(parser):
    parser.add_argument("--n-requests", type=int, default=256)
    parser.add_argument("--input-mean", type=float, default=512.0)
    parser.add_argument("--alpha", type=float, default=2.5, help="Pareto shape of prompt lengths")
    parser.add_argument("--output-mean", type=float, default=512.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="joulebench", description="Energy benchmarking for generative model serving")
    parser.add_argument("--store", default=os.environ.get(STORE_ENV, "results"),
                        help=f"Results store directory (default: ${STORE_ENV} or ./results)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Expand a sweep spec, run it and persist the results")
    run.add_argument("spec")
    run.add_argument("--dry-run", action="store_true", help="Print the expanded grid and exit")
    run.add_argument("--strict", action="store_true", help="Exit nonzero when any config fails")
    run.set_defaults(handler=cmd_run)

    analyze = commands.add_parser("analyze", help="Account energy for captured trace and serving log files")
    analyze.add_argument("--trace", action="append", required=True, help="Power trace file (repeatable)")
    analyze.add_argument("--log", required=True, help="Serving log file")
    analyze.add_argument("--max-batch-size", type=int)
    analyze.add_argument("--clock-origin")
    analyze.add_argument("--tdp-w", type=float)
    analyze.add_argument("--per-request", action="store_true")
    _accounting_flags(analyze)
    analyze.set_defaults(handler=cmd_analyze)

    rec = commands.add_parser("recommend", help="Minimum-energy config under a latency target")
    rec.add_argument("--metric", choices=sorted(LATENCY_METRICS))
    rec.add_argument("--target", type=parse_latency, required=True)
    rec.set_defaults(handler=cmd_recommend)

    report = commands.add_parser("report", help="Tables and the time-energy scatter")
    report.add_argument("--format", nargs="+", default=["csv"], help="csv, md and/or svg")
    report.add_argument("--out")
    report.add_argument("--metric", choices=sorted(LATENCY_METRICS))
    report.add_argument("--target", type=parse_latency)
    report.add_argument("--price-rates")
    report.add_argument("--carbon-rates")
    report.add_argument("--rate-offset", type=float, default=0.0,
                        help="Seconds added to run time to get rate-series time")
    report.set_defaults(handler=cmd_report)

    sim = commands.add_parser("simulate", help="Simulate one configuration and write its files")
    sim.add_argument("--profile", default="hi-tdp")
    sim.add_argument("--max-batch-size", type=int, default=32)
    sim.add_argument("--tp", type=int, default=1)
    sim.add_argument("--preemption-mode", choices=[m.value for m in PreemptionMode], default="recompute")
    sim.add_argument("--kv-budget", type=float)
    sim.add_argument("--dataset")
    sim.add_argument("--steps", type=int, help="Simulate diffusion with this many denoising steps")
    sim.add_argument("--resolution", default="512x512")
    sim.add_argument("--sampling-interval", type=float, default=0.01)
    sim.add_argument("--trace-kind", choices=[k.value for k in TraceKind], default=TraceKind.ENERGY.value)
    sim.add_argument("--out", default="sim-out")
    _workload_flags(sim)
    sim.set_defaults(handler=cmd_simulate)

    synth = commands.add_parser("synth-dataset", help="Write a synthetic request dataset")
    synth.add_argument("--out", required=True)
    _workload_flags(synth)
    synth.set_defaults(handler=cmd_synth_dataset)
    return parser


PARSE_ERRORS = (SpecError, MeterError, TelemetryError, StoreError, ReportError, MetricsError,
                InfeasibleConfig, InvalidDistributionParams)


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except NoFeasiblePoint as err:
        logger.error("%s", err)
        return EXIT_INFEASIBLE
    except EmptyInput as err:
        logger.error("%s", err)
        return EXIT_EMPTY
    except PARSE_ERRORS as err:
        logger.error("%s", err)
        return EXIT_SPEC
    except BenchError as err:
        logger.error("%s", err)
        return EXIT_INTERNAL
    except (OSError, UnicodeDecodeError) as err:
        logger.error("%s", err)
        return EXIT_SPEC
