"""Dependency-free SVG line charts from an experiment directory's CSVs.

Output is a pure function of the CSV contents: fixed canvas, fixed palette,
coordinates printed with two decimals, files processed in sorted order.
"""

from __future__ import annotations

import csv
import math
from html import escape
from pathlib import Path

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


class ReportError(RuntimeError):
    pass


def _nice_range(values):
    finite = [v for v in values if v is not None and math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def line_chart(title: str, series: list, xlabel: str = "", ylabel: str = "",
               xticks: list | None = None, markers: bool = False) -> str:
    """Render ``series = [(name, xs, ys), ...]`` as an SVG string.

    ``None`` or non-finite y values break the line. ``xticks`` is an optional
    list of ``(x, label)`` pairs replacing the numeric tick labels.
    """
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x0, x1 = _nice_range(xs_all)
    y0, y1 = _nice_range(ys_all)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-family="sans-serif" '
           f'font-size="14">{escape(title)}</text>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<line x1="{LEFT - 4}" y1="{py(yv):.2f}" x2="{LEFT}" y2="{py(yv):.2f}" stroke="#444"/>')
        out.append(f'<text x="{LEFT - 6}" y="{py(yv) + 4:.2f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{yv:.3g}</text>')
    ticks = xticks if xticks is not None else [(x0 + (x1 - x0) * i / 4, None) for i in range(5)]
    for xv, label in ticks:
        text = f"{xv:.3g}" if label is None else escape(str(label))
        out.append(f'<line x1="{px(xv):.2f}" y1="{TOP + ph}" x2="{px(xv):.2f}" y2="{TOP + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{px(xv):.2f}" y="{TOP + ph + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{text}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 10}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.2f}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 16 {TOP + ph / 2:.2f})">{escape(ylabel)}</text>')
    for k, (name, xs, ys) in enumerate(series):
        colour = PALETTE[k % len(PALETTE)]
        out.append(f'<g class="series" data-name="{escape(name)}">')
        segment = []
        for x, y in list(zip(xs, ys)) + [(None, None)]:
            if y is None or not math.isfinite(y):
                if len(segment) > 1:
                    out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" '
                               f'points="{" ".join(segment)}"/>')
                segment = []
                continue
            segment.append(f"{px(x):.2f},{py(y):.2f}")
            if markers:
                out.append(f'<circle class="pt" cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{colour}"/>')
        out.append("</g>")
        ly = TOP + 14 + 16 * k
        out.append(f'<line x1="{WIDTH - RIGHT + 10}" y1="{ly - 4}" x2="{WIDTH - RIGHT + 28}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - RIGHT + 32}" y="{ly}" font-family="sans-serif" '
                   f'font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _read_csv(path: Path) -> tuple[list, list]:
    rows = list(csv.reader(path.read_text().splitlines()))
    if not rows:
        raise ReportError(f"{path}: empty file")
    return rows[0], rows[1:]


def _num(text):
    return float(text) if text not in ("", None) else None


def _moving_mean(values, window):
    out = []
    for i in range(len(values)):
        chunk = [v for v in values[max(0, i - window + 1):i + 1] if v is not None]
        out.append(sum(chunk) / len(chunk) if chunk else None)
    return out


def _summary_charts(header, rows) -> dict:
    col = {name: i for i, name in enumerate(header)}
    if "final_mode_excess" not in col:
        return {}
    swept = [r for r in rows if r[col["axis"]]]
    if not swept:
        return {}
    axis = swept[0][col["axis"]]
    values = []
    for r in swept:
        if r[col["value"]] not in values:
            values.append(r[col["value"]])
    try:
        xpos = {v: float(v) for v in values}
        xticks = None
    except ValueError:
        xpos = {v: float(i) for i, v in enumerate(values)}
        xticks = [(float(i), v) for i, v in enumerate(values)]
    charts = {}
    for metric in ("final_mode_excess", "mean_variance", "final_distance"):
        series = []
        for est in dict.fromkeys(r[col["estimator"]] for r in swept):
            pts = sorted((xpos[r[col["value"]]], _num(r[col[metric]]))
                         for r in swept if r[col["estimator"]] == est)
            if any(y is not None for _, y in pts):
                series.append((est, [p[0] for p in pts], [p[1] for p in pts]))
        if series:
            charts[f"summary_{metric}.svg"] = line_chart(f"{metric} vs {axis}", series, axis, metric,
                                                         xticks, markers=True)
    return charts


def build_report(directory) -> dict:
    """Return ``{filename: svg_text}`` for every chart the directory supports."""
    directory = Path(directory)
    summary = directory / "summary.csv"
    traces = sorted((directory / "traces").glob("*.csv"))
    restores = sorted((directory / "restore").glob("*.csv"))
    if not summary.is_file() and not traces and not restores:
        raise ReportError(f"{directory}: no summary, trace or restore CSVs found")
    charts = {}
    if summary.is_file():
        header, rows = _read_csv(summary)
        charts.update(_summary_charts(header, rows))
    for path in traces:
        header, rows = _read_csv(path)
        if not rows:
            raise ReportError(f"{path}: trace has no steps")
        col = {name: i for i, name in enumerate(header)}
        steps = [float(r[col["step"]]) for r in rows]
        window = max(1, len(rows) // 50)
        series = []
        for name in ("cos_recon", "cos_cls", "cos_inv"):
            vals = [_num(r[col[name]]) for r in rows]
            if any(v is not None for v in vals):
                series.append((name, steps, _moving_mean(vals, window)))
        charts[f"cosine_{path.stem}.svg"] = line_chart(f"term cosines: {path.stem} (window {window})",
                                                       series, "step", "cosine")
    if restores:
        series = []
        for path in restores:
            header, rows = _read_csv(path)
            if not rows:
                raise ReportError(f"{path}: restore trajectory is empty")
            series.append((path.stem, [float(r[0]) for r in rows], [float(r[1]) for r in rows]))
        charts["restore.svg"] = line_chart("distance to clean point", series, "step", "distance")
    return charts


def write_report(directory) -> list:
    """Write all charts under ``<directory>/plots``; nothing is written if any input is bad."""
    charts = build_report(directory)
    plots = Path(directory) / "plots"
    plots.mkdir(exist_ok=True)
    written = []
    for name in sorted(charts):
        (plots / name).write_text(charts[name])
        written.append(plots / name)
    return written
