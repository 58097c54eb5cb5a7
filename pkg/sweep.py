"""
Configuration grids, sequential sweep execution and the results store
"""

import ast
import hashlib
import itertools
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import pandas as pd

from accounting import (
    AccountingMethod,
    SteadyParams,
    SteadyWindow,
    account_diffusion_run,
    account_llm_run,
    tdp_energy_estimate,
    tdp_overestimate_ratio,
)
from errors import (
    BenchError,
    ConstraintParseError,
    EmptyGrid,
    SpecError,
    StoreCorrupt,
    SweepError,
    UnknownDimension,
    VersionMismatch,
)
from meter import common_span, merge_energy, write_power_trace
from simulator import (
    DiffusionRequest,
    SimWorkload,
    WorkloadSpec,
    diffusion_workload,
    read_workload,
    synth_workload,
)
from telemetry import latency_metrics, output_length_stats, write_serving_log

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
INDEX_FILE = "index.csv"
RUNS_DIR = "runs"

DEFAULT_STEPS = 25
DEFAULT_RESOLUTION = "512x512"


class Task(Enum):
    CHAT = "chat"
    CODE = "code"
    T2I = "t2i"
    T2V = "t2v"
    I2V = "i2v"

    @property
    def is_diffusion(self):
        return self in (Task.T2I, Task.T2V, Task.I2V)


# Grid dimensions and their short spellings
DIMENSIONS = (
    "device_profile",
    "tp_degree",
    "max_batch_size",
    "denoising_steps",
    "resolution",
    "preemption_mode",
    "power_limit_w",
)
ALIASES = {"tp": "tp_degree", "batch": "max_batch_size", "steps": "denoising_steps", "profile": "device_profile"}


def canonical_dimension(name):
    name = ALIASES.get(name, name)
    if name not in DIMENSIONS:
        raise UnknownDimension(f"unknown grid dimension {name!r} (known: {', '.join(DIMENSIONS)})")
    return name


@dataclass(frozen=True)
class BenchmarkConfig:
    """One point of a sweep"""
    task: Task
    model_id: str = ""
    device_profile: str = "hi-tdp"
    tp_degree: int = 1
    max_batch_size: int = 1
    denoising_steps: int | None = None
    resolution: str | None = None
    preemption_mode: str = "recompute"
    power_limit_w: float | None = None

    def __post_init__(self):
        if not isinstance(self.task, Task):
            try:
                object.__setattr__(self, "task", Task(self.task))
            except ValueError as err:
                raise SpecError(f"unknown task {self.task!r}") from err
        if self.tp_degree < 1 or self.max_batch_size < 1:
            raise SpecError("tp_degree and max_batch_size must be >= 1")
        if self.preemption_mode not in ("recompute", "swap"):
            raise SpecError(f"preemption_mode must be recompute or swap, got {self.preemption_mode!r}")
        if self.task.is_diffusion:
            if self.denoising_steps is None or self.denoising_steps < 1 or not self.resolution:
                raise SpecError(f"{self.task.value} configs need denoising_steps >= 1 and a resolution")
        elif self.denoising_steps is not None or self.resolution is not None:
            raise SpecError(f"{self.task.value} configs take no denoising_steps or resolution")

    def to_dict(self):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values["task"] = self.task.value
        return values

    @classmethod
    def from_dict(cls, values):
        return cls(**values)

    @property
    def config_id(self):
        """Stable 64-bit hex digest of the field values"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RunResult:
    """Measured figures of one configuration; failed runs carry only the error"""
    config: BenchmarkConfig
    status: str = "ok"
    error: str | None = None
    energy_per_request_j: float = 0.0
    energy_per_token_j: float | None = None
    mean_tpot_s: float = 0.0
    mean_ttft_s: float = 0.0
    mean_e2e_s: float = 0.0
    throughput: float = 0.0
    avg_power_w: float = 0.0
    total_energy_j: float = 0.0
    method: str | None = None
    steady_window: SteadyWindow | None = None
    flags: tuple = ()
    tdp_ratio: float | None = None
    tdp_energy_per_request_j: float | None = None
    num_requests: int = 0
    output_tokens: dict = field(default_factory=dict)
    run_span: tuple = (0.0, 0.0)
    artifacts: dict = field(default_factory=dict)

    @property
    def config_id(self):
        return self.config.config_id

    @property
    def ok(self):
        return self.status == "ok"

    @classmethod
    def failed(cls, config, error):
        return cls(config, status="failed", error=str(error))

    def to_dict(self):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values["config"] = self.config.to_dict()
        values["flags"] = list(self.flags)
        values["run_span"] = list(self.run_span)
        if self.steady_window is not None:
            w = self.steady_window
            values["steady_window"] = {
                "t0": w.t0, "t1": w.t1, "saturation_fraction": w.saturation_fraction,
                "tokens_steady": w.tokens_steady, "energy_steady": w.energy_steady, "steady": w.steady,
            }
        return values

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        values["config"] = BenchmarkConfig.from_dict(values["config"])
        values["flags"] = tuple(values.get("flags", ()))
        values["run_span"] = tuple(values.get("run_span", (0.0, 0.0)))
        if values.get("steady_window") is not None:
            values["steady_window"] = SteadyWindow(**values["steady_window"])
        return cls(**values)


@dataclass
class SweepSpec:
    task: Task
    model_id: str = ""
    defaults: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    constraints: list = field(default_factory=list)
    workload: dict = field(default_factory=dict)
    accounting: SteadyParams = SteadyParams()
    repetitions: int = 1
    base_dir: Path = Path(".")

    @property
    def available_devices(self):
        return int(self.backend.get("devices", 8))


def parse_sweep_spec(text, base_dir="."):
    """Parse a TOML sweep spec"""
    try:
        document = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise SpecError(f"sweep spec is not valid TOML: {err}") from err

    task_section = dict(document.get("task", {}))
    if "kind" not in task_section:
        raise SpecError("[task] needs kind = chat | code | t2i | t2v | i2v")
    try:
        task = Task(task_section.pop("kind"))
    except ValueError as err:
        raise SpecError(f"unknown task kind: {err}") from err
    model_id = str(task_section.pop("model_id", ""))
    defaults = {canonical_dimension(k): v for k, v in task_section.items()}
    if task.is_diffusion:
        defaults.setdefault("denoising_steps", DEFAULT_STEPS)
        defaults.setdefault("resolution", DEFAULT_RESOLUTION)

    grid = {}
    for name, section in document.get("grid", {}).items():
        dimension = canonical_dimension(name)
        values = section.get("values") if isinstance(section, dict) else None
        if not isinstance(values, list):
            raise SpecError(f"[grid.{name}] needs values = [...]")
        if not values:
            raise EmptyGrid(f"[grid.{name}] lists no values")
        if dimension in grid:
            raise SpecError(f"dimension {dimension} given twice")
        grid[dimension] = values

    constraints = document.get("constraints", {}).get("expressions", [])
    if not isinstance(constraints, list) or not all(isinstance(c, str) for c in constraints):
        raise SpecError("[constraints] expressions must be a list of strings")

    accounting = dict(document.get("accounting", {}))
    repetitions = int(accounting.pop("repetitions", 1))
    if repetitions < 1:
        raise SpecError("repetitions must be >= 1")
    try:
        params = SteadyParams(**accounting)
    except TypeError as err:
        raise SpecError(f"bad [accounting] section: {err}") from err

    return SweepSpec(
        task=task,
        model_id=model_id,
        defaults=defaults,
        backend=dict(document.get("backend", {"kind": "simulator"})),
        grid=grid,
        constraints=list(constraints),
        workload=dict(document.get("workload", {})),
        accounting=params,
        repetitions=repetitions,
        base_dir=Path(base_dir),
    )


def load_sweep_spec(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise SpecError(f"cannot read sweep spec {path}: {err.strerror}") from err
    except UnicodeDecodeError as err:
        raise SpecError(f"sweep spec {path} is not valid UTF-8 ({err.reason})") from err
    return parse_sweep_spec(text, path.parent)


_COMPARE = {
    ast.Lt: lambda a, b: a < b,
    ast.LtE: lambda a, b: a <= b,
    ast.Gt: lambda a, b: a > b,
    ast.GtE: lambda a, b: a >= b,
    ast.Eq: lambda a, b: a == b,
    ast.NotEq: lambda a, b: a != b,
    ast.In: lambda a, b: a in b,
    ast.NotIn: lambda a, b: a not in b,
}
_ARITH = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Mod: lambda a, b: a % b,
}


class Constraint:
    """A boolean filter over config fields, e.g. `tp <= available_devices`"""
    def __init__(self, source):
        self.source = source
        text = source.replace("≤", "<=").replace("≥", ">=").replace("≠", "!=")
        try:
            self.tree = ast.parse(text, mode="eval").body
        except SyntaxError as err:
            raise ConstraintParseError(f"cannot parse constraint {source!r}: {err.msg}") from err
        self._check(self.tree)

    def _check(self, node):
        allowed = (ast.Compare, ast.BoolOp, ast.UnaryOp, ast.BinOp, ast.Name, ast.Constant, ast.Tuple, ast.List)
        if not isinstance(node, allowed):
            raise ConstraintParseError(f"unsupported syntax {type(node).__name__} in {self.source!r}")
        if isinstance(node, ast.Compare) and not all(type(op) in _COMPARE for op in node.ops):
            raise ConstraintParseError(f"unsupported comparison in {self.source!r}")
        if isinstance(node, ast.BinOp) and type(node.op) not in _ARITH:
            raise ConstraintParseError(f"unsupported operator in {self.source!r}")
        if isinstance(node, ast.UnaryOp) and not isinstance(node.op, (ast.Not, ast.USub)):
            raise ConstraintParseError(f"unsupported operator in {self.source!r}")
        if isinstance(node, ast.Name):
            name = ALIASES.get(node.id, node.id)
            if name not in DIMENSIONS and name != "available_devices":
                raise ConstraintParseError(f"unknown name {node.id!r} in {self.source!r}")
        for child in ast.iter_child_nodes(node):
            if isinstance(child, (ast.expr_context, ast.cmpop, ast.operator, ast.boolop, ast.unaryop)):
                continue
            self._check(child)

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            return env[ALIASES.get(node.id, node.id)]
        if isinstance(node, (ast.Tuple, ast.List)):
            return tuple(self._eval(e, env) for e in node.elts)
        if isinstance(node, ast.UnaryOp):
            value = self._eval(node.operand, env)
            return (not value) if isinstance(node.op, ast.Not) else -value
        if isinstance(node, ast.BinOp):
            return _ARITH[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.BoolOp):
            values = (self._eval(v, env) for v in node.values)
            return all(values) if isinstance(node.op, ast.And) else any(values)
        left = self._eval(node.left, env)
        for op, comparator in zip(node.ops, node.comparators):
            right = self._eval(comparator, env)
            if not _COMPARE[type(op)](left, right):
                return False
            left = right
        return True

    def __call__(self, config: BenchmarkConfig, available_devices):
        env = config.to_dict()
        env["available_devices"] = available_devices
        try:
            return bool(self._eval(self.tree, env))
        except TypeError as err:
            raise ConstraintParseError(f"constraint {self.source!r} failed on {config.config_id}: {err}") from err


def _sort_key(value):
    return (type(value).__name__, value)


def expand_grid(spec: SweepSpec, available_devices=None):
    """Cartesian product of the grid in dimension-name then value order, filtered by constraints"""
    if not spec.grid:
        raise EmptyGrid("sweep spec has no [grid.<dimension>] sections")
    available = spec.available_devices if available_devices is None else available_devices
    constraints = [Constraint(text) for text in spec.constraints]
    dimensions = sorted(spec.grid)
    axes = [sorted(set(spec.grid[d]), key=_sort_key) for d in dimensions]

    configs = []
    for values in itertools.product(*axes):
        fields_ = dict(spec.defaults)
        fields_.update(zip(dimensions, values))
        config = BenchmarkConfig(task=spec.task, model_id=spec.model_id, **fields_)
        if all(check(config, available) for check in constraints):
            configs.append(config)
    if not configs:
        raise EmptyGrid("every grid point was filtered out by the constraints")
    return configs


def build_workload(spec: SweepSpec, seed=0):
    """The request set every config of the sweep is served"""
    section = dict(spec.workload)
    if "dataset" in section:
        path = Path(section["dataset"])
        if not path.is_absolute():
            path = spec.base_dir / path
        return read_workload(path)
    n_requests = int(section.get("n_requests", 256))
    if spec.task.is_diffusion:
        return diffusion_workload(
            n_requests,
            int(spec.defaults.get("denoising_steps", DEFAULT_STEPS)),
            str(spec.defaults.get("resolution", DEFAULT_RESOLUTION)),
        )
    return synth_workload(
        WorkloadSpec(
            n_requests=n_requests,
            input_mean=float(section.get("input_mean", 512.0)),
            input_pareto_alpha=float(section.get("input_pareto_alpha", 2.5)),
            output_mean=float(section.get("output_mean", 512.0)),
        ),
        seed,
    )


def workload_for(config: BenchmarkConfig, workload: SimWorkload):
    """Apply a diffusion config's step count and resolution to every request"""
    if not config.task.is_diffusion:
        return workload
    return SimWorkload(tuple(
        DiffusionRequest(r.request_id, config.denoising_steps, config.resolution)
        for r in workload.requests
    ))


def measure_config(config, backend, workload, params=SteadyParams(), artifacts_dir=None):
    """Reset the backend, serve the workload and assemble a RunResult"""
    backend.reset(config)
    measurement = backend.execute(config, workload_for(config, workload))
    traces = list(measurement.traces.values())
    log = measurement.log
    artifacts = dict(measurement.artifacts)
    if artifacts_dir is not None:
        artifacts_dir = Path(artifacts_dir)
        artifacts_dir.mkdir(parents=True, exist_ok=True)
        log_name = f"{config.config_id}.log.jsonl"
        write_serving_log(artifacts_dir / log_name, log)
        artifacts["log"] = f"{RUNS_DIR}/{log_name}"
        if "trace" not in artifacts:
            trace_name = f"{config.config_id}.trace.jsonl"
            write_power_trace(artifacts_dir / trace_name, traces, measurement.clock_origin, measurement.tdp_w)
            artifacts["trace"] = f"{RUNS_DIR}/{trace_name}"

    if config.task.is_diffusion:
        account = account_diffusion_run(traces, log)
    else:
        account = account_llm_run(traces, log, config.max_batch_size, params)
    latency = latency_metrics(log.records)

    first, last = log.span
    trace_first, trace_last = common_span(traces)
    t0, t1 = max(first, trace_first), min(last, trace_last)
    total = merge_energy(traces, t0, t1)
    if account.window is not None:
        window = account.window
        throughput = window.tokens_steady / window.duration
        avg_power = window.energy_steady / window.duration
    else:
        throughput = len(log.records) / (t1 - t0)
        avg_power = total / (t1 - t0)

    tdp_ratio = tdp_estimate = None
    if measurement.tdp_w:
        tdp_ratio = tdp_overestimate_ratio(traces, t0, t1, measurement.tdp_w, measurement.num_devices)
        tdp_estimate = tdp_energy_estimate(account, tdp_ratio)

    result = RunResult(
        config=config,
        energy_per_request_j=account.energy_per_request,
        energy_per_token_j=account.energy_per_token,
        mean_tpot_s=latency.mean_tpot,
        mean_ttft_s=latency.mean_ttft,
        mean_e2e_s=latency.mean_e2e,
        throughput=throughput,
        avg_power_w=avg_power,
        total_energy_j=total,
        method=account.method.value,
        steady_window=account.window if account.method is AccountingMethod.STEADY_STATE else None,
        flags=tuple(account.flags) + tuple(measurement.flags),
        tdp_ratio=tdp_ratio,
        tdp_energy_per_request_j=tdp_estimate,
        num_requests=len(log.records),
        output_tokens=output_length_stats(log.records),
        run_span=(t0, t1),
        artifacts=artifacts,
    )
    _check_figures(result)
    return result


def _check_figures(result: RunResult):
    for name in ("energy_per_request_j", "energy_per_token_j", "mean_tpot_s", "mean_ttft_s",
                 "mean_e2e_s", "throughput", "avg_power_w", "total_energy_j"):
        value = getattr(result, name)
        if value is not None and not (math.isfinite(value) and value >= 0):
            raise SweepError(f"{name} = {value!r} is not a finite non-negative number")


_AVERAGED = (
    "energy_per_request_j", "energy_per_token_j", "mean_tpot_s", "mean_ttft_s", "mean_e2e_s",
    "throughput", "avg_power_w", "total_energy_j", "tdp_ratio", "tdp_energy_per_request_j",
)


def mean_result(results):
    """Average the numeric figures of repeated runs of one config"""
    first = results[0]
    if len(results) == 1:
        return first
    averaged = {}
    for name in _AVERAGED:
        values = [getattr(r, name) for r in results]
        averaged[name] = None if any(v is None for v in values) else math.fsum(values) / len(values)
    return replace(first, **averaged, flags=first.flags + (f"repetitions={len(results)}",))


def run_sweep(configs, backend, workload, params=SteadyParams(), repetitions=1, artifacts_dir=None, progress=None):
    """Run every config strictly one after another on `backend`

    A failing config is recorded as a failed RunResult and the sweep goes on.
    `progress` is called with (index, total, result) after each config.
    """
    configs = list(configs)
    if not configs:
        logger.warning("no configurations to run")
        return []
    backend.probe()

    results = []
    for index, config in enumerate(configs, start=1):
        try:
            runs = []
            for _ in range(repetitions):
                with backend.lease():
                    runs.append(measure_config(config, backend, workload, params, artifacts_dir))
            result = mean_result(runs)
        except BenchError as err:
            logger.warning("config %s failed: %s", config.config_id, err)
            result = RunResult.failed(config, err)
        results.append(result)
        if progress is not None:
            progress(index, len(configs), result)
    return results


INDEX_COLUMNS = (
    "config_id", "task", "model_id", "device_profile", "tp_degree", "max_batch_size",
    "denoising_steps", "resolution", "preemption_mode", "status",
    "energy_per_request_j", "mean_tpot_s", "mean_e2e_s",
)


def _index_row(result: RunResult):
    row = {"config_id": result.config_id}
    row.update(result.config.to_dict())
    row.update(
        status=result.status,
        energy_per_request_j=result.energy_per_request_j,
        mean_tpot_s=result.mean_tpot_s,
        mean_e2e_s=result.mean_e2e_s,
    )
    return {column: row.get(column) for column in INDEX_COLUMNS}


def persist_results(results, store_path):
    """Write one JSON document per run and merge them into the index"""
    store = Path(store_path)
    runs = store / RUNS_DIR
    runs.mkdir(parents=True, exist_ok=True)
    rows = {}
    index_path = store / INDEX_FILE
    if index_path.exists():
        existing = _read_index(index_path)
        rows = {row["config_id"]: row for row in existing.to_dict("records")}
    for result in results:
        document = {"schema_version": SCHEMA_VERSION, "result": result.to_dict()}
        (runs / f"{result.config_id}.json").write_text(
            json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        rows[result.config_id] = _index_row(result)
    table = pd.DataFrame([rows[k] for k in sorted(rows)], columns=list(INDEX_COLUMNS))
    table.to_csv(index_path, index=False, float_format="%.6g", lineterminator="\n")


def _read_index(index_path):
    try:
        return pd.read_csv(index_path, dtype={"config_id": str}, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise StoreCorrupt(f"unreadable index {index_path}") from err


def load_results(store_path):
    """Every RunResult in the store, ordered by config_id"""
    store = Path(store_path)
    index_path = store / INDEX_FILE
    if not index_path.exists():
        if any((store / RUNS_DIR).glob("*.json")):
            raise StoreCorrupt(f"run documents without {INDEX_FILE} in {store}")
        return []
    table = _read_index(index_path)
    if "config_id" not in table.columns:
        raise StoreCorrupt(f"{index_path} has no config_id column")

    results = []
    for config_id in sorted(table["config_id"]):
        path = store / RUNS_DIR / f"{config_id}.json"
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise StoreCorrupt("index references a missing run document", config_id) from None
        except (json.JSONDecodeError, UnicodeDecodeError) as err:
            raise StoreCorrupt("run document is not valid JSON", config_id) from err
        version = document.get("schema_version")
        if version != SCHEMA_VERSION:
            raise VersionMismatch(f"run {config_id} has schema version {version}, expected {SCHEMA_VERSION}")
        try:
            result = RunResult.from_dict(document["result"])
        except (KeyError, TypeError, BenchError) as err:
            raise StoreCorrupt(f"run document does not describe a result ({err})", config_id) from err
        if result.config_id != config_id:
            raise StoreCorrupt("run document does not match its config id", config_id)
        results.append(result)
    return results
