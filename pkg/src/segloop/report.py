"""Static run report: two stacked SVG charts plus a text summary.

The upper chart plots AP75/AR75 percentages per iteration; the lower chart
plots the detected-instance count with a dashed horizontal line at the
ground-truth count. Output bytes are a pure function of metrics.csv, so
reports are reproducible and diffable.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import MissingMetricsError

WIDTH = 640
CHART_LEFT, CHART_RIGHT = 64.0, 616.0
TOP_A, BOTTOM_A = 32.0, 236.0
TOP_B, BOTTOM_B = 300.0, 504.0
HEIGHT = 540

AP_COLOR = "#1f77b4"
AR_COLOR = "#ff7f0e"
COUNT_COLOR = "#2ca02c"


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    ap75: float | None
    ar75: float | None
    n_detected: int | None
    n_gt: int | None
    promoted: int


def read_metrics(path: str | Path) -> list[MetricsRow]:
    path = Path(path)
    if not path.exists():
        raise MissingMetricsError(f"{path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    rows: list[MetricsRow] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        rows.append(
            MetricsRow(
                iteration=int(cells[0]),
                ap75=float(cells[1]) if cells[1] else None,
                ar75=float(cells[2]) if cells[2] else None,
                n_detected=int(cells[3]) if cells[3] else None,
                n_gt=int(cells[4]) if cells[4] else None,
                promoted=int(cells[5]),
            )
        )
    if not rows:
        raise MissingMetricsError(f"{path} has a header but no data rows")
    return rows


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _polyline(points: list[tuple[float, float]], color: str, dashed: bool = False) -> list[str]:
    parts: list[str] = []
    if len(points) >= 2:
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        dash = ' stroke-dasharray="4,3"' if dashed else ""
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{coords}"/>'
        )
    for x, y in points:
        parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="2.5" fill="{color}"/>')
    return parts


def render_svg(rows: list[MetricsRow]) -> str:
    iterations = [r.iteration for r in rows]
    lo, hi = min(iterations), max(iterations)
    span = max(hi - lo, 1)

    def x_of(i: int) -> float:
        return CHART_LEFT + (i - lo) / span * (CHART_RIGHT - CHART_LEFT)

    def y_pct(v: float) -> float:
        return BOTTOM_A - v / 100.0 * (BOTTOM_A - TOP_A)

    counts = [r.n_detected for r in rows if r.n_detected is not None]
    gts = [r.n_gt for r in rows if r.n_gt is not None]
    count_max = max(counts + gts + [1]) * 1.15

    def y_count(v: float) -> float:
        return BOTTOM_B - v / count_max * (BOTTOM_B - TOP_B)

    s: list[str] = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]

    for top, bottom, title in (
        (TOP_A, BOTTOM_A, "AP75 / AR75 [%] per iteration"),
        (TOP_B, BOTTOM_B, "detected instances per iteration"),
    ):
        s.append(
            f'<text x="{_fmt(CHART_LEFT)}" y="{_fmt(top - 10)}" fill="black">{title}</text>'
        )
        s.append(
            f'<line x1="{_fmt(CHART_LEFT)}" y1="{_fmt(bottom)}" x2="{_fmt(CHART_RIGHT)}" '
            f'y2="{_fmt(bottom)}" stroke="black" stroke-width="1"/>'
        )
        s.append(
            f'<line x1="{_fmt(CHART_LEFT)}" y1="{_fmt(top)}" x2="{_fmt(CHART_LEFT)}" '
            f'y2="{_fmt(bottom)}" stroke="black" stroke-width="1"/>'
        )

    step = max(1, span // 10)
    for i in range(lo, hi + 1, step):
        x = x_of(i)
        for bottom in (BOTTOM_A, BOTTOM_B):
            s.append(
                f'<line x1="{_fmt(x)}" y1="{_fmt(bottom)}" x2="{_fmt(x)}" '
                f'y2="{_fmt(bottom + 4)}" stroke="black" stroke-width="1"/>'
            )
            s.append(
                f'<text x="{_fmt(x)}" y="{_fmt(bottom + 16)}" text-anchor="middle" '
                f'fill="black">{i}</text>'
            )
    for pct in (0, 25, 50, 75, 100):
        y = y_pct(pct)
        s.append(
            f'<text x="{_fmt(CHART_LEFT - 8)}" y="{_fmt(y + 4)}" text-anchor="end" '
            f'fill="black">{pct}</text>'
        )
        s.append(
            f'<line x1="{_fmt(CHART_LEFT - 4)}" y1="{_fmt(y)}" x2="{_fmt(CHART_LEFT)}" '
            f'y2="{_fmt(y)}" stroke="black" stroke-width="1"/>'
        )

    ap_points = [(x_of(r.iteration), y_pct(r.ap75 * 100)) for r in rows if r.ap75 is not None]
    ar_points = [(x_of(r.iteration), y_pct(r.ar75 * 100)) for r in rows if r.ar75 is not None]
    s.extend(_polyline(ap_points, AP_COLOR))
    s.extend(_polyline(ar_points, AR_COLOR, dashed=True))
    s.append(
        f'<text x="{_fmt(CHART_RIGHT - 120)}" y="{_fmt(TOP_A + 4)}" fill="{AP_COLOR}">AP75</text>'
    )
    s.append(
        f'<text x="{_fmt(CHART_RIGHT - 70)}" y="{_fmt(TOP_A + 4)}" fill="{AR_COLOR}">AR75</text>'
    )

    count_points = [
        (x_of(r.iteration), y_count(r.n_detected)) for r in rows if r.n_detected is not None
    ]
    s.extend(_polyline(count_points, COUNT_COLOR))
    if gts:
        y = y_count(gts[-1])
        s.append(
            f'<line id="gt-line" x1="{_fmt(CHART_LEFT)}" y1="{_fmt(y)}" '
            f'x2="{_fmt(CHART_RIGHT)}" y2="{_fmt(y)}" stroke="black" '
            f'stroke-width="1" stroke-dasharray="6,4"/>'
        )
        s.append(
            f'<text x="{_fmt(CHART_RIGHT - 150)}" y="{_fmt(y - 6)}" fill="black">'
            f"ground truth = {gts[-1]}</text>"
        )
        for v in sorted({0, gts[-1], int(count_max)}):
            yv = y_count(v)
            s.append(
                f'<text x="{_fmt(CHART_LEFT - 8)}" y="{_fmt(yv + 4)}" text-anchor="end" '
                f'fill="black">{v}</text>'
            )
    s.append("</svg>")
    return "\n".join(s) + "\n"


def render_summary(rows: list[MetricsRow]) -> str:
    lines = [f"iterations: {len(rows)}"]
    scored = [r for r in rows if r.ap75 is not None]
    if scored:
        best = max(scored, key=lambda r: (r.ap75, -r.iteration))
        lines += [
            f"best_iteration: {best.iteration}",
            f"best_ap75: {best.ap75:.6f}",
            f"best_ar75: {best.ar75:.6f}",
            f"n_ground_truth: {best.n_gt}",
            f"detected_at_best: {best.n_detected}",
        ]
    return "\n".join(lines) + "\n"


def render_report(run_dir: str | Path) -> tuple[Path, Path]:
    """Write report.svg and summary.txt next to metrics.csv."""
    run_dir = Path(run_dir)
    rows = read_metrics(run_dir / "metrics.csv")
    svg_path = run_dir / "report.svg"
    summary_path = run_dir / "summary.txt"
    svg_path.write_text(render_svg(rows), encoding="utf-8")
    summary_path.write_text(render_summary(rows), encoding="utf-8")
    return svg_path, summary_path
