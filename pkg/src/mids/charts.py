"""Self-contained SVG line charts for a finished run directory.

Each chart plots one metric against generation with one series per arm and
a shaded 95% band.  The batch strata chart is a stacked area, one panel per
arm.  Runs with a generator chain also get class and group balance charts,
where generations in which most seeds collapsed are shaded.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 64, "right": 150, "top": 40, "bottom": 48}

CLASSIFIER_CHARTS = (
    ("accuracy", "accuracy", "Accuracy"),
    ("acc_gap", "acc_gap", "Accuracy gap between groups"),
    ("dp", "dp", "Demographic parity difference"),
    ("eodds", "eodds", "Equalized odds difference"),
    ("kl_classifier", "kl_classifier", "KL(classifier strata || ideal)"),
)


class ChartError(RuntimeError):
    pass


@dataclass
class Series:
    name: str
    x: list[float]
    y: list[float]
    lo: list[float]
    hi: list[float]
    color: str


def _num(text: str) -> float:
    return float(text) if text not in ("", None) else math.nan


def load_summary(run_dir) -> dict[str, list[dict[str, float]]]:
    path = Path(run_dir) / "summary.csv"
    if not path.is_file():
        raise ChartError(f"no summary.csv in {run_dir}")
    by_arm: dict[str, list[dict[str, float]]] = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            arm = row.pop("arm")
            by_arm.setdefault(arm, []).append({k: _num(v) for k, v in row.items()})
    if not by_arm:
        raise ChartError(f"summary.csv in {run_dir} has no rows")
    return by_arm


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.4g}"


class _Frame:
    """Maps data coordinates onto a plot rectangle."""

    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim, self.ylim = xlim, ylim

    def px(self, x):
        a, b = self.xlim
        return self.x0 + (x - a) / ((b - a) or 1) * self.w

    def py(self, y):
        a, b = self.ylim
        return self.y0 + self.h - (y - a) / ((b - a) or 1) * self.h

    def axes(self, xlabel, ylabel) -> list[str]:
        out = [
            f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}" '
            'fill="none" stroke="#444"/>'
        ]
        for t in nice_ticks(*self.xlim):
            x = self.px(t)
            out.append(f'<line x1="{x:.1f}" y1="{self.y0 + self.h}" x2="{x:.1f}" '
                       f'y2="{self.y0 + self.h + 4}" stroke="#444"/>')
            out.append(f'<text x="{x:.1f}" y="{self.y0 + self.h + 16}" font-size="11" '
                       f'text-anchor="middle">{_fmt(t)}</text>')
        for t in nice_ticks(*self.ylim):
            y = self.py(t)
            out.append(f'<line x1="{self.x0}" y1="{y:.1f}" x2="{self.x0 + self.w}" y2="{y:.1f}" '
                       'stroke="#ddd"/>')
            out.append(f'<text x="{self.x0 - 6}" y="{y + 4:.1f}" font-size="11" '
                       f'text-anchor="end">{_fmt(t)}</text>')
        out.append(f'<text x="{self.x0 + self.w / 2:.1f}" y="{self.y0 + self.h + 34}" '
                   f'font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
        cy = self.y0 + self.h / 2
        out.append(f'<text x="{self.x0 - 46}" y="{cy:.1f}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 {self.x0 - 46} {cy:.1f})">{escape(ylabel)}</text>')
        return out


def _document(title: str, body: list[str], width=WIDTH, height=HEIGHT) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{width / 2:.1f}" y="22" font-size="14" text-anchor="middle">'
        f"{escape(title)}</text>\n"
    )
    return head + "\n".join(body) + "\n</svg>\n"


def _segments(xs, ys):
    """Split a polyline at NaNs."""
    seg = []
    for x, y in zip(xs, ys):
        if math.isfinite(y):
            seg.append((x, y))
        elif seg:
            yield seg
            seg = []
    if seg:
        yield seg


def line_chart(title: str, series: list[Series], ylabel: str,
               shade: dict[str, list[float]] | None = None) -> str:
    xs = [x for s in series for x in s.x]
    ys = [v for s in series for v in (*s.y, *s.lo, *s.hi) if math.isfinite(v)]
    xlim = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if ys:
        lo, hi = min(ys), max(ys)
        pad = (hi - lo) * 0.05 or 0.05
        ylim = (lo - pad, hi + pad)
    else:
        ylim = (0.0, 1.0)
    frame = _Frame(MARGIN["left"], MARGIN["top"], WIDTH - MARGIN["left"] - MARGIN["right"],
                   HEIGHT - MARGIN["top"] - MARGIN["bottom"], xlim, ylim)
    body = []
    colors = {s.name: s.color for s in series}
    half = frame.w / max(1, (xlim[1] - xlim[0])) / 2
    for name, gens in (shade or {}).items():
        for g in gens:
            x = frame.px(g) - half
            body.append(f'<rect class="collapse" x="{x:.1f}" y="{frame.y0}" width="{2 * half:.1f}" '
                        f'height="{frame.h}" fill="{colors.get(name, "#999")}" fill-opacity="0.08"/>')
    body += frame.axes("generation", ylabel)
    for s in series:
        for seg in _segments(range(len(s.x)), [
            y if math.isfinite(a) and math.isfinite(b) else math.nan
            for y, a, b in zip(s.y, s.lo, s.hi)
        ]):
            idx = [i for i, _ in seg]
            upper = [(frame.px(s.x[i]), frame.py(s.hi[i])) for i in idx]
            lower = [(frame.px(s.x[i]), frame.py(s.lo[i])) for i in reversed(idx)]
            pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in upper + lower)
            body.append(f'<polygon class="band" points="{pts}" fill="{s.color}" '
                        'fill-opacity="0.2" stroke="none"/>')
        for seg in _segments(s.x, s.y):
            pts = " ".join(f"{frame.px(x):.1f},{frame.py(y):.1f}" for x, y in seg)
            body.append(f'<polyline class="series" data-arm={quoteattr(s.name)} points="{pts}" '
                        f'fill="none" stroke="{s.color}" stroke-width="2"/>')
    lx = frame.x0 + frame.w + 14
    for k, s in enumerate(series):
        y = frame.y0 + 10 + 18 * k
        body.append(f'<rect x="{lx}" y="{y - 8}" width="14" height="4" fill="{s.color}"/>')
        body.append(f'<text x="{lx + 20}" y="{y - 2}" font-size="12">{escape(s.name)}</text>')
    return _document(title, body)


def stacked_chart(title: str, panels: dict[str, list[list[float]]], x: list[float],
                  labels: list[str]) -> str:
    """One stacked-area panel per arm; ``panels[arm][cell][gen]`` are shares."""
    n = max(1, len(panels))
    pw, ph = 260, 260
    width = MARGIN["left"] + n * (pw + 30) + MARGIN["right"]
    height = ph + MARGIN["top"] + MARGIN["bottom"] + 10
    body = []
    xlim = (min(x), max(x)) if x else (0.0, 1.0)
    for p, (arm, cells) in enumerate(panels.items()):
        frame = _Frame(MARGIN["left"] + p * (pw + 30), MARGIN["top"] + 10, pw, ph, xlim, (0.0, 1.0))
        body.append(f'<text x="{frame.x0 + pw / 2:.1f}" y="{frame.y0 - 4}" font-size="12" '
                    f'text-anchor="middle">{escape(arm)}</text>')
        base = [0.0] * len(x)
        for c, vals in enumerate(cells):
            vals = [v if math.isfinite(v) else 0.0 for v in vals]
            top = [b + v for b, v in zip(base, vals)]
            pts = [(frame.px(xi), frame.py(t)) for xi, t in zip(x, top)]
            pts += [(frame.px(xi), frame.py(b)) for xi, b in reversed(list(zip(x, base)))]
            path = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            body.append(f'<polygon class="stack" points="{path}" '
                        f'fill="{PALETTE[c % len(PALETTE)]}" fill-opacity="0.75" stroke="none"/>')
            base = top
        body += frame.axes("generation", "share of batch" if p == 0 else "")
    lx = width - MARGIN["right"] + 10
    for c, lab in enumerate(labels):
        y = MARGIN["top"] + 20 + 18 * c
        body.append(f'<rect x="{lx}" y="{y - 10}" width="12" height="12" '
                    f'fill="{PALETTE[c % len(PALETTE)]}"/>')
        body.append(f'<text x="{lx + 18}" y="{y}" font-size="12">{escape(lab)}</text>')
    return _document(title, body, width, height)


def _series(by_arm, key) -> list[Series]:
    out = []
    for k, (arm, rows) in enumerate(by_arm.items()):
        if not any(f"{key}_mean" in r for r in rows):
            continue
        out.append(Series(
            arm,
            [r["generation"] for r in rows],
            [r.get(f"{key}_mean", math.nan) for r in rows],
            [r.get(f"{key}_ci_low", math.nan) for r in rows],
            [r.get(f"{key}_ci_high", math.nan) for r in rows],
            PALETTE[k % len(PALETTE)],
        ))
    return out


def _cell_labels(manifest) -> list[str]:
    ds = next(iter(manifest["config"]["arms"].values()))["dataset"]
    groups = ds["groups"]
    names = ["s"] if len(groups) == 1 else [f"s{k + 1}" for k in range(len(groups))]
    return [
        ",".join([f"y={cell[0]}", *(f"{n}={g}" for n, g in zip(names, cell[1:]))])
        for cell in itertools.product(range(ds["n_labels"]), *(range(g) for g in groups))
    ]


def render_charts(run_dir) -> dict[str, str]:
    """All chart documents for a run, keyed by file name."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ChartError(f"run directory not found: {run_dir}")
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ChartError(f"no manifest.json in {run_dir}")
    manifest = json.loads(manifest_path.read_text())
    by_arm = load_summary(run_dir)
    charts = {}
    for key, fname, title in CLASSIFIER_CHARTS:
        charts[f"{fname}.svg"] = line_chart(title, _series(by_arm, key), title)

    labels = _cell_labels(manifest)
    x = next(iter([r["generation"] for r in rows] for rows in by_arm.values()))
    panels = {}
    for arm, rows in by_arm.items():
        panels[arm] = [[r.get(f"batch_strata_{c}_mean", math.nan) for r in rows]
                       for c in range(len(labels))]
    charts["batch_strata.svg"] = stacked_chart("Training batch strata", panels, x, labels)

    if any(k != "SeqClass" for k in manifest.get("kinds", [])):
        arms_cfg = manifest["config"]["arms"]
        shade = {
            arm: [r["generation"] for r in rows if r.get("collapsed_mean", 0) >= 0.5]
            for arm, rows in by_arm.items()
        }
        first = next(iter(arms_cfg.values()))["dataset"]
        ben, maj = first["beneficial_label"], first["majoritized_group"]
        charts["class_balance.svg"] = line_chart(
            f"Generator class balance (share of label {ben})",
            _series(by_arm, f"class_balance_{ben}"), "share", shade)
        charts["group_balance.svg"] = line_chart(
            f"Generator group balance (share of group {maj})",
            _series(by_arm, f"group_balance_0_{maj}"), "share", shade)
        charts["kl_generator.svg"] = line_chart(
            "KL(generator strata || ideal)", _series(by_arm, "kl_generator"), "KL", shade)
    return charts


def emit_charts(run_dir) -> list[Path]:
    """Render every chart, then write them under ``run_dir/charts``.

    Rendering finishes before anything is written, so a failure leaves no
    partial files behind.
    """
    charts = render_charts(run_dir)
    out = Path(run_dir) / "charts"
    out.mkdir(exist_ok=True)
    paths = []
    for name, doc in charts.items():
        target = out / name
        target.write_text(doc)
        paths.append(target)
    return paths
