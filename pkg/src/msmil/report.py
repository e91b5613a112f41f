"""Result tables and the bar-chart report.

The chart groups bars by (classifier, k) with one bar per method, accuracy
on a y-axis starting at 0.5, a black whisker of one standard deviation on
top of each bar and an optional horizontal blue rule marking a reference
baseline accuracy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError, SizeError
from .harness import ExperimentResult

RESULT_COLUMNS = ["method", "k", "classifier", "nP", "aug1", "repetitions",
                  "mean_acc", "std_acc", "seed", "seconds"]

METHOD_COLORS = {
    "baseline": "#4878cf",
    "MC": "#e6c229",
    "MA": "#4caf50",
    "MM": "#d64545",
}
_METHOD_ORDER = {m: i for i, m in enumerate(METHOD_COLORS)}


@dataclass
class ResultRow:
    """One results-CSV line; what the chart needs to draw a bar."""

    method: str
    k: int
    classifier: str
    n_patches: int
    aug1: bool
    repetitions: int
    mean_acc: float
    std_acc: float
    seed: int
    seconds: float | None = None


def result_row(result: ExperimentResult,
               include_timing: bool = False) -> ResultRow:
    cfg = result.config
    return ResultRow(
        method=cfg.method, k=cfg.k, classifier=cfg.classifier,
        n_patches=cfg.n_patches, aug1=cfg.aug1,
        repetitions=cfg.repetitions, mean_acc=result.mean_acc,
        std_acc=result.std_acc, seed=cfg.seed,
        seconds=result.wall_seconds if include_timing else None,
    )


def write_results_csv(path: str | Path, rows: Iterable[ResultRow]) -> None:
    """Deterministic results table; the seconds field stays empty unless
    timing was explicitly recorded (wall time varies between runs)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow([
                r.method, r.k, r.classifier, r.n_patches,
                1 if r.aug1 else 0, r.repetitions,
                f"{r.mean_acc:.9g}", f"{r.std_acc:.9g}", r.seed,
                "" if r.seconds is None else f"{r.seconds:.3f}",
            ])


def read_results_csv(path: str | Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULT_COLUMNS:
            raise FormatError(f"{path}: not a results CSV (bad header)")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if len(rec) != len(RESULT_COLUMNS):
                raise FormatError(f"{path}:{line}: malformed row")
            rows.append(ResultRow(
                method=rec[0], k=int(rec[1]), classifier=rec[2],
                n_patches=int(rec[3]), aug1=rec[4] == "1",
                repetitions=int(rec[5]), mean_acc=float(rec[6]),
                std_acc=float(rec[7]), seed=int(rec[8]),
                seconds=float(rec[9]) if rec[9] else None,
            ))
    return rows


def write_per_repetition_csv(path: str | Path,
                             result: ExperimentResult) -> None:
    """Per-repetition accuracies, plus the chosen grid cell when the
    optimized classifier ran."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["repetition", "accuracy", "kernel", "gamma", "C"])
        chosen = result.chosen or [None] * len(result.accuracies)
        for rep, acc in enumerate(result.accuracies):
            cell = chosen[rep] if rep < len(chosen) else None
            if cell is None:
                writer.writerow([rep, f"{acc:.9g}", "", "", ""])
            else:
                kernel, gamma, c = cell
                writer.writerow([
                    rep, f"{acc:.9g}", kernel,
                    "" if gamma is None else f"{gamma:.9g}", f"{c:.9g}",
                ])


def _bar_sort_key(row: ResultRow):
    return (row.classifier, row.k, _METHOD_ORDER.get(row.method, 99),
            row.method)


def render_report_svg(rows: Sequence[ResultRow],
                      baseline_mean: float | None = None) -> str:
    """Bar chart of mean accuracies: one bar per result row, grouped by
    (classifier, k), y-axis starting at 0.5, std whiskers on top."""
    if not rows:
        raise SizeError("no results to chart")
    rows = sorted(rows, key=_bar_sort_key)
    groups: list[tuple[tuple, list[ResultRow]]] = []
    for row in rows:
        key = (row.classifier, row.k)
        if groups and groups[-1][0] == key:
            groups[-1][1].append(row)
        else:
            groups.append((key, [row]))

    y_min, y_max = 0.5, 1.0
    bar_w, bar_gap, group_gap = 34, 6, 26
    margin_l, margin_r, margin_t, margin_b = 64, 24, 48, 64
    chart_h = 260
    chart_w = sum(len(g[1]) * (bar_w + bar_gap) - bar_gap for g in groups) \
        + group_gap * (len(groups) - 1)
    width = margin_l + chart_w + margin_r
    height = margin_t + chart_h + margin_b

    def y_of(value: float) -> float:
        clipped = min(max(value, y_min), y_max)
        return margin_t + chart_h * (1.0 - (clipped - y_min) / (y_max - y_min))

    svg = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-size="14">Mean accuracy by classifier, k and method</text>',
    ]
    # horizontal grid and y labels
    ticks = 5
    for t in range(ticks + 1):
        value = y_min + (y_max - y_min) * t / ticks
        y = y_of(value)
        svg.append(f'<line x1="{margin_l}" y1="{y:.1f}" '
                   f'x2="{margin_l + chart_w}" y2="{y:.1f}" '
                   f'stroke="#dddddd"/>')
        svg.append(f'<text x="{margin_l - 8}" y="{y + 4:.1f}" '
                   f'text-anchor="end">{value:.1f}</text>')

    x = float(margin_l)
    for (classifier, k), members in groups:
        group_width = len(members) * (bar_w + bar_gap) - bar_gap
        for row in members:
            top = y_of(row.mean_acc)
            bottom = y_of(y_min)
            color = METHOD_COLORS.get(row.method, "#888888")
            svg.append(
                f'<rect x="{x:.1f}" y="{top:.1f}" width="{bar_w}" '
                f'height="{max(bottom - top, 0):.1f}" fill="{color}">'
                f'<title>{row.method} k={row.k} {row.classifier}: '
                f'{row.mean_acc:.3f} &#177; {row.std_acc:.3f}</title></rect>'
            )
            # std whisker on top of the bar
            cx = x + bar_w / 2
            whisker_top = y_of(row.mean_acc + row.std_acc)
            svg.append(f'<line x1="{cx:.1f}" y1="{top:.1f}" x2="{cx:.1f}" '
                       f'y2="{whisker_top:.1f}" stroke="black"/>')
            svg.append(f'<line x1="{cx - 5:.1f}" y1="{whisker_top:.1f}" '
                       f'x2="{cx + 5:.1f}" y2="{whisker_top:.1f}" '
                       f'stroke="black"/>')
            x += bar_w + bar_gap
        label_x = x - bar_gap - group_width / 2
        svg.append(f'<text x="{label_x:.1f}" y="{margin_t + chart_h + 18}" '
                   f'text-anchor="middle">{classifier} k={k}</text>')
        x += group_gap - bar_gap

    if baseline_mean is not None:
        y = y_of(baseline_mean)
        svg.append(f'<line x1="{margin_l}" y1="{y:.1f}" '
                   f'x2="{margin_l + chart_w}" y2="{y:.1f}" '
                   f'stroke="#1f4fd1" stroke-width="1.5" '
                   f'stroke-dasharray="6,3"/>')
        svg.append(f'<text x="{margin_l + chart_w}" y="{y - 5:.1f}" '
                   f'text-anchor="end" fill="#1f4fd1">'
                   f'baseline {baseline_mean:.3f}</text>')

    # legend
    lx = margin_l
    ly = margin_t + chart_h + 40
    for method, color in METHOD_COLORS.items():
        if any(r.method == method for r in rows):
            svg.append(f'<rect x="{lx}" y="{ly - 10}" width="12" height="12" '
                       f'fill="{color}"/>')
            svg.append(f'<text x="{lx + 16}" y="{ly}">{method}</text>')
            lx += 90
    svg.append("</svg>")
    return "\n".join(svg)


def emit_report(results: Sequence[ExperimentResult], csv_path: str | Path,
                svg_path: str | Path, baseline_mean: float | None = None,
                include_timing: bool = False) -> None:
    """Write the results CSV and the grouped bar-chart SVG."""
    if not results:
        raise SizeError("no results to report")
    rows = [result_row(r, include_timing=include_timing) for r in results]
    write_results_csv(csv_path, rows)
    Path(svg_path).write_text(
        render_report_svg(rows, baseline_mean=baseline_mean))
