"""
Error hierarchy shared by every joulebench module
"""


class BenchError(Exception):
    """Base class for all harness errors"""


# Meter

class MeterError(BenchError):
    """Power trace parsing or window query failed"""
    def __init__(self, message, device_id=None):
        if device_id is not None:
            message = f"device {device_id}: {message}"
        super().__init__(message)
        self.device_id = device_id


class MalformedRecord(MeterError):
    pass


class MixedKind(MeterError):
    pass


class NonMonotonicTime(MeterError):
    pass


class WindowOutOfRange(MeterError):
    pass


class EmptyTrace(MeterError):
    pass


class ZeroDuration(MeterError):
    pass


class ClockOriginMismatch(MeterError):
    pass


# Telemetry

class TelemetryError(BenchError):
    """Serving log parsing or latency aggregation failed"""


class MalformedEvent(MalformedRecord, TelemetryError):
    """A serving-log line that is not a valid event"""


class OrphanEvent(TelemetryError):
    pass


class DuplicateLifecycle(TelemetryError):
    pass


class OverlappingIterations(TelemetryError):
    pass


class EmptyInput(BenchError):
    """An operation that needs at least one element got none"""


class MissingFirstToken(TelemetryError):
    pass


# Accounting

class AccountingError(BenchError):
    """Energy accounting could not be performed"""


class SteadyStateNotFound(AccountingError):
    """The batch never stayed saturated long enough"""
    def __init__(self, message, max_observed=0):
        super().__init__(f"{message} (max observed batch size {max_observed})")
        self.max_observed = max_observed


class ZeroSteadyTokens(AccountingError):
    pass


class EmptyBatch(AccountingError):
    pass


class ZeroMeasuredEnergy(AccountingError):
    pass


# Simulator

class SimulationError(BenchError):
    """The serving simulator could not run"""


class InfeasibleConfig(SimulationError):
    pass


class NonTerminating(SimulationError):
    pass


class InvalidDistributionParams(SimulationError):
    pass


# Sweep and results store

class SweepError(BenchError):
    """Sweep specification or execution problem"""


class SpecError(SweepError):
    pass


class EmptyGrid(SpecError):
    pass


class UnknownDimension(SpecError):
    pass


class ConstraintParseError(SpecError):
    pass


class BackendUnavailable(SweepError):
    pass


class StoreError(BenchError):
    """Results store could not be read or written"""


class StoreCorrupt(StoreError):
    def __init__(self, message, config_id=None):
        if config_id is not None:
            message = f"{message}: {config_id}"
        super().__init__(message)
        self.config_id = config_id


class VersionMismatch(StoreError):
    pass


# Optimizer

class OptimizerError(BenchError):
    """Frontier or recommendation could not be computed"""


class NonFiniteCoordinate(OptimizerError):
    pass


class NoFeasiblePoint(OptimizerError):
    """No configuration meets the latency target"""
    def __init__(self, target, min_latency):
        super().__init__(
            f"no configuration meets target {target:.6g} s; "
            f"minimum achievable latency is {min_latency:.6g} s"
        )
        self.target = target
        self.min_latency = min_latency


# Derived metrics

class MetricsError(BenchError):
    """Derived metric could not be computed"""


class ZeroPower(MetricsError):
    pass


class RateCoverageGap(MetricsError):
    pass


class KindMismatch(MetricsError):
    pass


# Reports

class ReportError(BenchError):
    """Report rendering failed"""


class UnsupportedFormat(ReportError):
    pass
