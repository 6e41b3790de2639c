"""Report tables and hand-written SVG figures for reviewed alerts.

Everything here formats numbers with fixed precision so that the same
inputs always give byte-identical files.
"""

from __future__ import annotations

import csv
import math
import os
from typing import Sequence

from .evaluation import BinSummary, KappaResult, LinearFit, RocSummary

_W, _H = 480, 320
_L, _R, _T, _B = 56, 16, 28, 44


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _frame(title: str, xlabel: str, ylabel: str, ymax: float, yticks: Sequence[float]) -> list[str]:
    pw, ph = _W - _L - _R, _H - _T - _B
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{_L}" y1="{_T + ph}" x2="{_L + pw}" y2="{_T + ph}" stroke="black"/>',
           f'<line x1="{_L}" y1="{_T}" x2="{_L}" y2="{_T + ph}" stroke="black"/>']
    for k in range(6):
        x = _L + pw * k / 5
        out.append(f'<text x="{x:.1f}" y="{_T + ph + 15}" text-anchor="middle">{k / 5:.1f}</text>')
    for v in yticks:
        y = _T + ph - ph * v / ymax
        out.append(f'<line x1="{_L - 4}" y1="{y:.1f}" x2="{_L}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{_L - 6}" y="{y + 4:.1f}" text-anchor="end">{v:g}</text>')
    out.append(f'<text x="{_L + pw / 2:.1f}" y="{_H - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{_T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {_T + ph / 2:.1f})">{ylabel}</text>')
    return out


def _bars(counts: Sequence[float], ymax: float, fill: str) -> list[str]:
    pw, ph = _W - _L - _R, _H - _T - _B
    bw = pw / len(counts)
    out = []
    for k, c in enumerate(counts):
        if not c or (isinstance(c, float) and math.isnan(c)):
            continue
        h = ph * c / ymax
        out.append(f'<rect x="{_L + k * bw + 2:.1f}" y="{_T + ph - h:.1f}" width="{bw - 4:.1f}" '
                   f'height="{h:.1f}" fill="{fill}" stroke="black"/>')
    return out


def histogram_svg(counts: Sequence[int]) -> str:
    """Bar chart of alert counts per score bin."""
    top = max(max(counts, default=0), 1)
    step = max(1, math.ceil(top / 5))
    ymax = step * 5
    out = _frame("Alerts by alert score", "alert score", "number of alerts", ymax,
                 [step * k for k in range(6)])
    out += _bars(counts, ymax, "#8fb3d9")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def rates_svg(bins: Sequence[BinSummary], fit: LinearFit | None) -> str:
    """True alert rate per bin with the fitted regression line."""
    out = _frame("True alert rate by alert score", "alert score", "true alert rate", 1.0,
                 [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    out += _bars([b.true_alert_rate if b.n else 0 for b in bins], 1.0, "#f2c38f")
    if fit is not None:
        pw, ph = _W - _L - _R, _H - _T - _B

        def pt(x):
            y = min(max(fit.intercept + fit.slope * x, 0.0), 1.0)
            return _L + pw * x, _T + ph - ph * y

        (x0, y0), (x1, y1) = pt(0.0), pt(1.0)
        out.append(f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1:.1f}" y2="{y1:.1f}" '
                   f'stroke="#b22222" stroke-width="2"/>')
        out.append(f'<text x="{_L + 8}" y="{_T + 12}">slope {fit.slope:.3f}, '
                   f'p {fit.p_value:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_evaluation_report(out_dir, roc: RocSummary | None, bins: Sequence[BinSummary],
                            fit: LinearFit | None, histogram: Sequence[int],
                            kappas: dict[tuple[str, str], KappaResult] | None = None,
                            gold=None) -> list[str]:
    """Write every report file; returns the written file names (sorted)."""
    os.makedirs(out_dir, exist_ok=True)
    p = lambda name: os.path.join(out_dir, name)  # noqa: E731
    names = ["bins.csv", "fit.csv", "histogram.csv", "roc.csv",
             "alert_score_histogram.svg", "true_alert_rate.svg"]
    write_table(p("bins.csv"), ["lower", "upper", "midpoint", "n", "n_useful", "true_alert_rate"],
                [(b.lower, b.upper, b.midpoint, b.n, b.n_useful, b.true_alert_rate) for b in bins])
    if fit is None:
        write_table(p("fit.csv"), ["mode", "slope", "intercept", "slope_se", "p_value"], [])
    else:
        write_table(p("fit.csv"), ["mode", "slope", "intercept", "slope_se", "p_value"],
                    [(fit.mode, fit.slope, fit.intercept, fit.slope_se, fit.p_value)])
    write_table(p("histogram.csv"), ["lower", "upper", "count"],
                [(b.lower, b.upper, c) for b, c in zip(bins, histogram)])
    write_table(p("roc.csv"), ["auc", "se", "z", "p_value", "n_pos", "n_neg"],
                [] if roc is None else [(roc.auc, roc.se, roc.z, roc.p_value, roc.n_pos, roc.n_neg)])
    with open(p("alert_score_histogram.svg"), "w") as fh:
        fh.write(histogram_svg(histogram))
    with open(p("true_alert_rate.svg"), "w") as fh:
        fh.write(rates_svg(bins, fit))
    if kappas is not None:
        write_table(p("kappa.csv"), ["reviewer_a", "reviewer_b", "kappa", "observed",
                                     "expected", "degenerate"],
                    [(a, b, k.kappa, k.observed, k.expected, int(k.degenerate))
                     for (a, b), k in sorted(kappas.items())])
        names.append("kappa.csv")
    if gold is not None:
        write_table(p("gold_standard.csv"), ["alert_id", "useful", "votes_useful", "votes_total"],
                    [(g.alert_id, int(g.useful), g.votes_useful, g.votes_total) for g in gold])
        names.append("gold_standard.csv")
    return sorted(names)
