"""Condenses map-quality, localization and effort results into comparison
tables, a quality-to-effort scatter (SVG) and machine-readable reports.

All formatting is deterministic: fixed number formatting, no wall-clock or
environment-dependent content.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .mapmetrics import DeviationStats, MapQualityReport


class ReportError(ValueError):
    """Invalid report input."""


@dataclass(frozen=True)
class EffortLedger:
    """Per-approach data volume and time bookkeeping.

    gross_time covers the first map creation including one-time setup and
    parameterization; net_time covers any subsequent map creation.
    """

    approach: str
    data_volume_gb: float
    gross_time_h: float
    net_time_h: float
    notes: str = ""

    def __post_init__(self):
        if min(self.data_volume_gb, self.gross_time_h, self.net_time_h) < 0:
            raise ReportError("effort values must be >= 0")
        if self.net_time_h > self.gross_time_h:
            raise ReportError("net_time must be <= gross_time")


@dataclass(frozen=True)
class ApproachResult:
    """One mapping approach's full evaluation: map quality, localization
    checkpoint statistics, divergence timestamp (or None), effort."""

    approach: str
    map_quality: MapQualityReport
    localization: DeviationStats
    divergence_time: float | None
    effort: EffortLedger


@dataclass(frozen=True)
class QualityEffortPoint:
    approach: str
    basis: str                  # "gross" | "net"
    effort_h: float
    map_deviation_m: float
    localization_deviation_m: float

    def __post_init__(self):
        if self.effort_h <= 0:
            raise ReportError(f"effort must be > 0 to plot, got {self.effort_h}")


def quality_effort_points(results, time_basis: str = "both") -> list:
    """One point per approach and requested time basis; an approach whose
    gross and net times differ yields two points under basis='both'."""
    if time_basis not in ("gross", "net", "both"):
        raise ReportError(f"unknown time basis {time_basis!r}")
    points = []
    for r in results:
        geo = r.map_quality.geometric
        if geo is None:
            raise ReportError(f"{r.approach}: geometric leg missing")
        bases = []
        if time_basis in ("gross", "both"):
            bases.append(("gross", r.effort.gross_time_h))
        if time_basis in ("net", "both"):
            if time_basis == "net" or r.effort.net_time_h != r.effort.gross_time_h:
                bases.append(("net", r.effort.net_time_h))
        for basis, hours in bases:
            points.append(QualityEffortPoint(
                approach=r.approach, basis=basis, effort_h=hours,
                map_deviation_m=geo.average,
                localization_deviation_m=r.localization.average))
    return points


def quality_effort_ratio(point: QualityEffortPoint) -> float:
    """Toolkit-defined scalar: 1 / (effort_h * sqrt(map_dev * loc_dev)).

    Higher is better; strictly monotone decreasing in effort and in both
    deviations. The underlying scatter is the primary artifact; this scalar is
    a documented convenience for ranking.
    """
    if point.effort_h <= 0:
        raise ReportError("effort must be > 0")
    if point.map_deviation_m <= 0 or point.localization_deviation_m <= 0:
        raise ReportError("deviations must be > 0")
    return 1.0 / (point.effort_h
                  * math.sqrt(point.map_deviation_m * point.localization_deviation_m))


# ---------------------------------------------------------------------------
# tables

def _fmt(value) -> str:
    if value is None:
        return "n/a"
    return format(value, "g")


def _stats_rows(stats_by_approach: dict, to_cm: bool = True) -> list:
    rows = []
    factor = 100.0 if to_cm else 1.0
    for label, attr in (("Average", "average"), ("Median", "median"),
                        ("MAX", "max"), ("MIN", "min")):
        row = [label]
        for stats in stats_by_approach.values():
            row.append(_fmt(None if stats is None else getattr(stats, attr) * factor))
        rows.append(row)
    return rows


def _csv_text(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit_tables(results) -> dict:
    """Three CSV tables (as strings): geometric verification, localization
    deviations, and the procedure overview; approaches are columns in input
    order, deviations reported in cm."""
    results = list(results)
    if not results:
        raise ReportError("at least one result required")
    names = [r.approach for r in results]

    geo = {r.approach: r.map_quality.geometric for r in results}
    table1 = _csv_text(["stat"] + [f"{n} [cm]" for n in names], _stats_rows(geo))

    loc = {r.approach: r.localization for r in results}
    table2 = _csv_text(["stat"] + [f"{n} [cm]" for n in names], _stats_rows(loc))

    rows3 = [
        ["Used Data [GB]"] + [_fmt(r.effort.data_volume_gb) for r in results],
        ["Gross Time [h]"] + [_fmt(r.effort.gross_time_h) for r in results],
        ["Net Time [h]"] + [_fmt(r.effort.net_time_h) for r in results],
    ]
    table3 = _csv_text(["item"] + names, rows3)
    return {"geometric": table1, "localization": table2, "effort": table3}


def parse_table(text: str) -> dict:
    """Parse an emitted CSV table back into {column: {row_label: value}}."""
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0]
    out: dict = {col: {} for col in header[1:]}
    for row in rows[1:]:
        for col, cell in zip(header[1:], row[1:]):
            out[col][row[0]] = None if cell == "n/a" else float(cell)
    return out


def report_json_dict(results) -> dict:
    """Machine-readable report document for the full result set."""
    return {
        "schema_version": 1,
        "approaches": [
            {
                "approach": r.approach,
                "map_quality": r.map_quality.to_json_dict(),
                "localization": {
                    "average_m": r.localization.average,
                    "median_m": r.localization.median,
                    "max_m": r.localization.max,
                    "min_m": r.localization.min,
                    "count": r.localization.count,
                },
                "divergence_time_s": r.divergence_time,
                "effort": {
                    "data_volume_gb": r.effort.data_volume_gb,
                    "gross_time_h": r.effort.gross_time_h,
                    "net_time_h": r.effort.net_time_h,
                    "notes": r.effort.notes,
                },
            }
            for r in results
        ],
    }


# ---------------------------------------------------------------------------
# scatter (self-contained SVG, fully deterministic byte output)

_SVG_W, _SVG_H = 640, 420
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 20, 30, 50
_SERIES = (("map", "map_deviation_m", "#1f77b4", "circle"),
           ("localization", "localization_deviation_m", "#d62728", "square"))


def _fmt_svg(x: float) -> str:
    return f"{x:.2f}"


def render_scatter(points) -> str:
    """Quality-to-effort scatter: x = effort hours (log scale), y = deviation
    in meters, two labeled series (map and localization deviation)."""
    points = list(points)
    if not points:
        raise ReportError("at least one point required")
    xs = [p.effort_h for p in points]
    ys = [p.map_deviation_m for p in points] + [p.localization_deviation_m for p in points]
    x_lo = min(xs) / 1.5
    x_hi = max(xs) * 1.5
    y_lo = 0.0
    y_hi = max(ys) * 1.15 or 1.0

    plot_w = _SVG_W - _MARGIN_L - _MARGIN_R
    plot_h = _SVG_H - _MARGIN_T - _MARGIN_B

    def sx(v):
        return _MARGIN_L + plot_w * (math.log10(v) - math.log10(x_lo)) / \
            (math.log10(x_hi) - math.log10(x_lo))

    def sy(v):
        return _MARGIN_T + plot_h * (1.0 - (v - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
        f'height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{_MARGIN_L}" y1="{_SVG_H - _MARGIN_B}" x2="{_SVG_W - _MARGIN_R}" '
        f'y2="{_SVG_H - _MARGIN_B}" stroke="black"/>',
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
        f'y2="{_SVG_H - _MARGIN_B}" stroke="black"/>',
        f'<text x="{_SVG_W // 2}" y="{_SVG_H - 12}" text-anchor="middle" '
        f'font-size="13">mapping effort [h, log scale]</text>',
        f'<text x="16" y="{_SVG_H // 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {_SVG_H // 2})">deviation [m]</text>',
    ]
    # decade ticks on the log axis
    lo_dec = math.floor(math.log10(x_lo))
    hi_dec = math.ceil(math.log10(x_hi))
    for d in range(lo_dec, hi_dec + 1):
        v = 10.0 ** d
        if not (x_lo <= v <= x_hi):
            continue
        x = sx(v)
        parts.append(f'<line x1="{_fmt_svg(x)}" y1="{_SVG_H - _MARGIN_B}" '
                     f'x2="{_fmt_svg(x)}" y2="{_SVG_H - _MARGIN_B + 5}" stroke="black"/>')
        parts.append(f'<text x="{_fmt_svg(x)}" y="{_SVG_H - _MARGIN_B + 18}" '
                     f'text-anchor="middle" font-size="11">{format(v, "g")}</text>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = y_lo + (y_hi - y_lo) * frac
        y = sy(v)
        parts.append(f'<line x1="{_MARGIN_L - 5}" y1="{_fmt_svg(y)}" '
                     f'x2="{_MARGIN_L}" y2="{_fmt_svg(y)}" stroke="black"/>')
        parts.append(f'<text x="{_MARGIN_L - 8}" y="{_fmt_svg(y + 4)}" '
                     f'text-anchor="end" font-size="11">{v:.2f}</text>')

    for series_name, attr, color, shape in _SERIES:
        for p in points:
            x = sx(p.effort_h)
            y = sy(getattr(p, attr))
            label = p.approach if p.basis == "gross" else f"{p.approach} ({p.basis})"
            if shape == "circle":
                parts.append(f'<circle cx="{_fmt_svg(x)}" cy="{_fmt_svg(y)}" r="5" '
                             f'fill="{color}"/>')
            else:
                parts.append(f'<rect x="{_fmt_svg(x - 4.5)}" y="{_fmt_svg(y - 4.5)}" '
                             f'width="9" height="9" fill="{color}"/>')
            parts.append(f'<text x="{_fmt_svg(x + 8)}" y="{_fmt_svg(y - 6)}" '
                         f'font-size="11" fill="{color}">{label} ({series_name})</text>')

    # legend
    parts.append(f'<circle cx="{_SVG_W - 190}" cy="20" r="5" fill="{_SERIES[0][2]}"/>')
    parts.append(f'<text x="{_SVG_W - 180}" y="24" font-size="12">map deviation</text>')
    parts.append(f'<rect x="{_SVG_W - 194.5}" y="33.5" width="9" height="9" '
                 f'fill="{_SERIES[1][2]}"/>')
    parts.append(f'<text x="{_SVG_W - 180}" y="42" font-size="12">localization deviation</text>')
    parts.append('</svg>')
    return "\n".join(parts) + "\n"
