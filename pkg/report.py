"""
Summary tables and the time-energy scatter
"""

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
from PyQt5.QtCore import QBuffer, QByteArray, QIODevice, QPointF, QRect, QRectF, QSize, Qt
from PyQt5.QtGui import QBrush, QColor, QFont, QGuiApplication, QPainter, QPainterPath, QPen, QPolygonF

from errors import EmptyInput, NoFeasiblePoint, UnsupportedFormat
from metrics import EnergySegment, carbon_emissions, electricity_cost, throughput_per_watt
from optimizer import default_metric, pareto_frontier, points_from_results, recommend

logger = logging.getLogger(__name__)

FORMATS = ("csv", "md", "svg")
FILE_NAMES = {"csv": "report.csv", "md": "report.md", "svg": "frontier.svg"}

WIDTH = 720
HEIGHT = 480
MARGIN_LEFT = 80
MARGIN_RIGHT = 30
MARGIN_TOP = 40
MARGIN_BOTTOM = 60

PALETTE = (
    QColor(31, 119, 180),
    QColor(255, 127, 14),
    QColor(44, 160, 44),
    QColor(214, 39, 40),
    QColor(148, 103, 189),
)

_application = None


@dataclass
class ReportBundle:
    """Everything one report renders"""
    rows: list
    frontier: list
    metric: str
    recommendation: object = None
    formats: tuple = ("csv",)
    labels: list = field(default_factory=list)


def _row(result, frontier_ids, price_rates, carbon_rates, rate_offset_s):
    row = {"config_id": result.config_id}
    row.update(result.config.to_dict())
    row.update(
        status=result.status,
        energy_per_request_j=result.energy_per_request_j if result.ok else None,
        energy_per_token_j=result.energy_per_token_j,
        tdp_energy_per_request_j=result.tdp_energy_per_request_j,
        tdp_ratio=result.tdp_ratio,
        mean_ttft_s=result.mean_ttft_s if result.ok else None,
        mean_tpot_s=result.mean_tpot_s if result.ok else None,
        mean_e2e_s=result.mean_e2e_s if result.ok else None,
        throughput=result.throughput if result.ok else None,
        avg_power_w=result.avg_power_w if result.ok else None,
        throughput_per_watt=throughput_per_watt(result) if result.ok and result.avg_power_w > 0 else None,
        total_energy_j=result.total_energy_j if result.ok else None,
        output_tokens_mean=result.output_tokens.get("mean"),
        on_frontier=result.config_id in frontier_ids,
        flags=";".join(result.flags),
    )
    segment = [EnergySegment(result.run_span[0], result.run_span[1], result.total_energy_j)]
    if price_rates is not None:
        row["cost_usd"] = electricity_cost(segment, price_rates, rate_offset_s) if result.ok else None
    if carbon_rates is not None:
        row["carbon_g"] = carbon_emissions(segment, carbon_rates, rate_offset_s) if result.ok else None
    if not result.ok:
        row["error"] = result.error
    return row


def build_report(results, metric=None, target=None, price_rates=None, carbon_rates=None,
                 rate_offset_s=0.0, formats=("csv",)):
    results = sorted(results, key=lambda r: r.config_id)
    if not results:
        raise EmptyInput("no results to report")
    for fmt in formats:
        if fmt not in FORMATS:
            raise UnsupportedFormat(f"unsupported report format {fmt!r} (known: {', '.join(FORMATS)})")
    metric = metric or default_metric(results[0].config.task)
    points = points_from_results(results, metric)
    frontier = pareto_frontier(points) if points else []
    recommendation = None
    if target is not None and points:
        try:
            recommendation = recommend(points, metric, target)
        except NoFeasiblePoint as err:
            logger.warning("%s", err)
    frontier_ids = {p.config_id for p in frontier}
    rows = [_row(r, frontier_ids, price_rates, carbon_rates, rate_offset_s) for r in results]
    return ReportBundle(rows, frontier, metric, recommendation, tuple(formats),
                        sorted({p.label for p in points}))


def _table(bundle):
    columns = []
    for row in bundle.rows:
        columns.extend(k for k in row if k not in columns)
    return pd.DataFrame(bundle.rows, columns=columns)


def render_csv(bundle: ReportBundle):
    return _table(bundle).to_csv(index=False, float_format="%.6g", lineterminator="\n")


def _cell(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, bool):
        return "yes" if value else ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_markdown(bundle: ReportBundle):
    table = _table(bundle)
    lines = [
        f"# Energy report ({bundle.metric} latency, mean)",
        "",
        "| " + " | ".join(table.columns) + " |",
        "|" + "---|" * len(table.columns),
    ]
    for row in bundle.rows:
        lines.append("| " + " | ".join(_cell(row.get(c)) for c in table.columns) + " |")
    if bundle.recommendation is not None:
        rec = bundle.recommendation
        lines += [
            "",
            "## Recommendation",
            "",
            f"- target: {rec.target:.6g} s ({rec.metric})",
            f"- chosen: `{rec.chosen.config_id}` at {rec.chosen.latency:.6g} s, {rec.chosen.energy:.6g} J",
            f"- baseline: `{rec.baseline.config_id}` at {rec.baseline.latency:.6g} s, {rec.baseline.energy:.6g} J",
            f"- savings: {rec.savings_fraction:.6g}",
        ]
    return "\n".join(lines) + "\n"


def _ensure_application():
    global _application
    os.environ.setdefault("QT_QPA_PLATFORM", "offscreen")
    _application = QGuiApplication.instance() or QGuiApplication(["joulebench"])
    return _application


class ScatterPlot:
    """Maps (latency, energy) onto the plot area"""
    def __init__(self, points):
        latencies = [p.latency for p in points] or [0.0, 1.0]
        energies = [p.energy for p in points] or [0.0, 1.0]
        self.x_range = self._padded(min(latencies), max(latencies))
        self.y_range = self._padded(min(energies), max(energies))
        self.area = QRectF(MARGIN_LEFT, MARGIN_TOP, WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
                           HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)

    @staticmethod
    def _padded(lo, hi):
        pad = (hi - lo) * 0.08 or max(abs(hi) * 0.1, 1e-9)
        return lo - pad, hi + pad

    def map(self, latency, energy):
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        x = self.area.left() + (latency - x0) / (x1 - x0) * self.area.width()
        y = self.area.bottom() - (energy - y0) / (y1 - y0) * self.area.height()
        return QPointF(x, y)

    def draw_axes(self, painter: QPainter, metric):
        painter.setPen(QPen(QColor(60, 60, 60), 1))
        painter.setBrush(Qt.NoBrush)
        painter.drawRect(self.area)

        # Ticks as one path
        ticks = QPainterPath()
        painter.setFont(QFont("Sans", 8))
        for k in range(5):
            fraction = k / 4
            x = self.area.left() + fraction * self.area.width()
            y = self.area.bottom() - fraction * self.area.height()
            ticks.moveTo(x, self.area.bottom())
            ticks.lineTo(x, self.area.bottom() + 5)
            ticks.moveTo(self.area.left() - 5, y)
            ticks.lineTo(self.area.left(), y)
            latency = self.x_range[0] + fraction * (self.x_range[1] - self.x_range[0])
            energy = self.y_range[0] + fraction * (self.y_range[1] - self.y_range[0])
            painter.drawText(QRectF(x - 30, self.area.bottom() + 8, 60, 14), Qt.AlignCenter, f"{latency:.3g}")
            painter.drawText(QRectF(4, y - 7, MARGIN_LEFT - 12, 14), Qt.AlignRight | Qt.AlignVCenter,
                             f"{energy:.3g}")
        painter.drawPath(ticks)

        painter.setFont(QFont("Sans", 10))
        painter.drawText(QRectF(self.area.left(), HEIGHT - 28, self.area.width(), 18), Qt.AlignCenter,
                         f"mean {metric} latency (s)")
        painter.drawText(QRectF(self.area.left(), 10, self.area.width(), 20), Qt.AlignCenter,
                         "energy per request (J) vs latency")


def render_svg(bundle: ReportBundle, points):
    """Scatter with one marker per point and a polyline through the frontier"""
    from PyQt5.QtSvg import QSvgGenerator

    _ensure_application()
    data = QByteArray()
    buffer = QBuffer(data)
    buffer.open(QIODevice.WriteOnly)
    generator = QSvgGenerator()
    generator.setOutputDevice(buffer)
    generator.setSize(QSize(WIDTH, HEIGHT))
    generator.setViewBox(QRect(0, 0, WIDTH, HEIGHT))
    generator.setTitle("time-energy frontier")
    generator.setDescription(f"{len(points)} runs, {len(bundle.frontier)} on the frontier")

    plot = ScatterPlot(points)
    colors = {label: PALETTE[i % len(PALETTE)] for i, label in enumerate(bundle.labels)}

    painter = QPainter()
    painter.begin(generator)
    painter.fillRect(QRectF(0, 0, WIDTH, HEIGHT), QColor(255, 255, 255))
    plot.draw_axes(painter, bundle.metric)

    frontier_ids = {p.config_id for p in bundle.frontier}
    for point in sorted(points, key=lambda p: (p.latency, p.config_id)):
        color = colors.get(point.label, PALETTE[0])
        on_frontier = point.config_id in frontier_ids
        painter.setPen(QPen(QColor(0, 0, 0) if on_frontier else color, 2 if on_frontier else 1))
        painter.setBrush(QBrush(color))
        radius = 5 if on_frontier else 3.5
        painter.drawEllipse(plot.map(point.latency, point.energy), radius, radius)

    if len(bundle.frontier) >= 2:
        painter.setPen(QPen(QColor(0, 0, 0), 1.5))
        painter.setBrush(Qt.NoBrush)
        painter.drawPolyline(QPolygonF([plot.map(p.latency, p.energy) for p in bundle.frontier]))

    # Legend swatches per device profile
    painter.setFont(QFont("Sans", 8))
    for i, label in enumerate(bundle.labels):
        y = MARGIN_TOP + 8 + 14 * i
        painter.fillRect(QRectF(WIDTH - MARGIN_RIGHT - 110, y, 8, 8), colors[label])
        painter.setPen(QPen(QColor(30, 30, 30), 1))
        painter.drawText(QRectF(WIDTH - MARGIN_RIGHT - 96, y - 3, 96, 14), Qt.AlignLeft | Qt.AlignVCenter,
                         label or "-")
    painter.end()
    buffer.close()
    return bytes(data).decode("utf-8")


def write_report(bundle: ReportBundle, out_dir, results):
    """Write each requested format; returns the paths written"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in bundle.formats:
        path = out_dir / FILE_NAMES[fmt]
        if fmt == "csv":
            text = render_csv(bundle)
        elif fmt == "md":
            text = render_markdown(bundle)
        else:
            text = render_svg(bundle, points_from_results(results, bundle.metric))
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written
