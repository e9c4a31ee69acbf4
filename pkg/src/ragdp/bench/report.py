"""Tables and SVG plots from report.csv (and timing.csv when present).

The SVG writer is hand-rolled so output bytes depend only on the input rows: fixed
number formatting, fixed palette, no timestamps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from ragdp.bench.pipeline import read_rows

BASE_NAMES = {"vp": "DDPM", "ve": "EDM"}
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


class ReportError(ValueError):
    pass


def method_name(row: dict) -> str:
    mode, sampler = row["mode"], row["sampler"]
    if mode == "baseline-full":
        return "full"
    if mode == "baseline-fast":
        return {"vp-ancestral": "reduced DDPM", "vp-fast": "DDIM", "ve-euler": "reduced Euler"}[sampler]
    if mode == "ragdp-vp":
        return "RAGDP-VP" if sampler == "vp-ancestral" else "RAGDP-VP+DDIM"
    return "RAGDP-VE"


def validate_rows(rows: list[dict]) -> None:
    if not rows:
        raise ReportError("report is empty")
    bases = {(r["task"], r["base_model"]) for r in rows if r["mode"] == "baseline-full"}
    for r in rows:
        if (r["task"], r["base_model"]) not in bases:
            raise ReportError(
                f"row {method_name(r)} ({r['task']}, {r['base_model']}) has no baseline-full row to recover against"
            )
        if not 0.0 <= float(r["success_rate"]) <= 1.0:
            raise ReportError(f"success rate {r['success_rate']} outside [0, 1]")


def _speedup_label(s: str) -> str:
    if s == "inf":
        return "xinf"
    v = float(s)
    return f"x{v:g}" if v == round(v) else f"x{v:.3g}"


def recovery_table(rows: list[dict]) -> tuple[list[str], list[list[str]]]:
    """Table V layout: one line per (task, method, base model), one column per speed-up."""
    body = [r for r in rows if r["mode"] != "baseline-full"]
    speeds = sorted({r["speedup"] for r in body}, key=lambda s: math.inf if s == "inf" else float(s))
    header = ["task", "method", "base_model"] + [_speedup_label(s) for s in speeds]
    lines: dict[tuple, dict] = {}
    for r in body:
        key = (r["task"], method_name(r), BASE_NAMES.get(r["base_model"], r["base_model"]))
        rec = r["recovery_rate"]
        cell = "n/a" if rec in ("", "n/a") else f"{100 * float(rec):.2f}%"
        lines.setdefault(key, {})[r["speedup"]] = cell
    table = [list(key) + [lines[key].get(s, "") for s in speeds] for key in lines]
    return header, table


def table_csv(header: list[str], table: list[list[str]]) -> str:
    return "\n".join(",".join(line) for line in [header, *table]) + "\n"


def table_markdown(header: list[str], table: list[list[str]]) -> str:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(line) + " |" for line in table]
    return "\n".join(out) + "\n"


# -- SVG ------------------------------------------------------------------------------


def _n(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


@dataclass
class Series:
    label: str
    points: list[tuple[float, float]]
    dashed: bool = False


@dataclass
class Axis:
    label: str
    lo: float
    hi: float
    ticks: list[float]
    log: bool = False  # log10(1 + x) mapping so zero stays representable

    def t(self, v: float) -> float:
        f = (lambda x: math.log10(1.0 + x)) if self.log else (lambda x: x)
        lo, hi = f(self.lo), f(self.hi)
        return 0.5 if hi == lo else (f(v) - lo) / (hi - lo)


@dataclass
class Plot:
    title: str
    x: Axis
    y: Axis
    series: list[Series] = field(default_factory=list)
    width: int = 640
    height: int = 420
    margin: tuple[int, int, int, int] = (40, 170, 50, 60)  # top, right, bottom, left

    def render(self) -> str:
        top, right, bottom, left = self.margin
        pw, ph = self.width - left - right, self.height - top - bottom

        def px(v):
            return left + pw * self.x.t(v)

        def py(v):
            return top + ph * (1.0 - self.y.t(v))

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif" font-size="11">',
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
            f'<text x="{_n(left + pw / 2)}" y="22" text-anchor="middle" font-size="14">{_esc(self.title)}</text>',
            f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
        ]
        for v in self.x.ticks:
            x = px(v)
            out.append(f'<line x1="{_n(x)}" y1="{top}" x2="{_n(x)}" y2="{top + ph}" stroke="#ddd"/>')
            out.append(f'<text x="{_n(x)}" y="{top + ph + 15}" text-anchor="middle">{_tick(v)}</text>')
        for v in self.y.ticks:
            y = py(v)
            out.append(f'<line x1="{left}" y1="{_n(y)}" x2="{left + pw}" y2="{_n(y)}" stroke="#ddd"/>')
            out.append(f'<text x="{left - 6}" y="{_n(y + 4)}" text-anchor="end">{_tick(v)}</text>')
        out.append(f'<text x="{_n(left + pw / 2)}" y="{self.height - 12}" text-anchor="middle">{_esc(self.x.label)}</text>')
        out.append(
            f'<text x="16" y="{_n(top + ph / 2)}" text-anchor="middle" '
            f'transform="rotate(-90 16 {_n(top + ph / 2)})">{_esc(self.y.label)}</text>'
        )
        for i, s in enumerate(self.series):
            color = PALETTE[i % len(PALETTE)]
            pts = sorted(s.points)
            coords = " ".join(f"{_n(px(a))},{_n(py(b))}" for a, b in pts)
            dash = ' stroke-dasharray="5,3"' if s.dashed else ""
            if len(pts) > 1:
                out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.8"{dash}/>')
            for a, b in pts:
                out.append(f'<circle cx="{_n(px(a))}" cy="{_n(py(b))}" r="3.2" fill="{color}"/>')
            ly = top + 14 + 18 * i
            lx = left + pw + 14
            out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"{dash}/>')
            out.append(f'<text x="{lx + 24}" y="{ly}">{_esc(s.label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _tick(v: float) -> str:
    return f"{v:g}"


def _nice_log_ticks(hi: float) -> list[float]:
    ticks = [0.0]
    decade = 1.0
    while decade <= hi * 1.0001:
        ticks += [m * decade for m in (1, 2, 5) if m * decade <= hi * 1.0001]
        decade *= 10
    return ticks


SUCCESS_AXIS = Axis("success rate", 0.0, 1.0, [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])


def _group(rows: list[dict]) -> dict[tuple[str, str, str], list[dict]]:
    groups: dict[tuple[str, str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["task"], r["base_model"], method_name(r)), []).append(r)
    return groups


def steps_plot(rows: list[dict]) -> Plot:
    """Success against network evaluations per generation, one curve per method."""
    series = []
    bases = {(r["task"], r["base_model"]): r for r in rows if r["mode"] == "baseline-full"}
    multi_task = len({r["task"] for r in rows}) > 1
    for (task, kind, method), grp in _group(rows).items():
        if method == "full":
            continue
        pts = [(float(r["network_evals"]), float(r["success_rate"])) for r in grp]
        if not method.startswith("RAGDP"):
            b = bases[(task, kind)]
            pts.append((float(b["network_evals"]), float(b["success_rate"])))
        label = f"{method} ({BASE_NAMES.get(kind, kind)})" + (f" {task}" if multi_task else "")
        series.append(Series(label, pts, dashed=not method.startswith("RAGDP")))
    hi = max(float(r["network_evals"]) for r in rows)
    return Plot("Success vs sampling steps", Axis("network evaluations per generation", 0.0, hi, _nice_log_ticks(hi), log=True), SUCCESS_AXIS, series)


def speed_plot(rows: list[dict], timing: list[dict]) -> Plot:
    """Success against mean wall-clock per generation call."""
    key_cols = ("task", "base_model", "mode", "sampler", "steps", "r")
    ms = {tuple(t[k] for k in key_cols): float(t["mean_gen_ms"]) for t in timing if t["mean_gen_ms"] != "n/a"}
    series = []
    for (task, kind, method), grp in _group(rows).items():
        pts = [(ms[k], float(r["success_rate"])) for r in grp if (k := tuple(r[c] for c in key_cols)) in ms]
        if pts:
            series.append(Series(f"{method} ({BASE_NAMES.get(kind, kind)})", pts, dashed=not method.startswith("RAGDP")))
    hi = max((p[0] for s in series for p in s.points), default=1.0)
    return Plot("Success vs generation time", Axis("mean generation time [ms]", 0.0, hi, _nice_log_ticks(hi), log=True), SUCCESS_AXIS, series)


def r_sweep_plot(rows: list[dict]) -> Plot:
    series = []
    for (task, kind, method), grp in _group(rows).items():
        if method.startswith("RAGDP"):
            series.append(Series(f"{method} ({BASE_NAMES.get(kind, kind)})", [(float(r["r"]), float(r["success_rate"])) for r in grp]))
    ticks = [0.0, 0.25, 0.5, 0.75, 1.0]
    return Plot("Success vs leap ratio r", Axis("leap ratio r", 0.0, 1.0, ticks), SUCCESS_AXIS, series)


def cmd_report(report_csv, out_dir, timing_csv=None) -> list[str]:
    """Write tables and plots; returns human-readable notices (e.g. skipped plots)."""
    report_csv = Path(report_csv)
    if not report_csv.exists():
        raise ReportError(f"no report at {report_csv}")
    rows = read_rows(report_csv)
    validate_rows(rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    notices = []
    header, table = recovery_table(rows)
    (out / "recovery_table.csv").write_text(table_csv(header, table))
    (out / "recovery_table.md").write_text(table_markdown(header, table))
    if len(rows) < 2:
        notices.append("single-row report: table written, plots skipped")
        return notices
    (out / "steps_vs_success.svg").write_text(steps_plot(rows).render())
    if any(r["r"] for r in rows):
        (out / "r_sweep.svg").write_text(r_sweep_plot(rows).render())
    else:
        notices.append("no RAGDP rows: r-sweep plot skipped")
    timing_csv = Path(timing_csv) if timing_csv else report_csv.with_name("timing.csv")
    if timing_csv.exists():
        (out / "speed_vs_accuracy.svg").write_text(speed_plot(rows, read_rows(timing_csv)).render())
    else:
        notices.append(f"no timing file at {timing_csv}: speed plot skipped")
    return notices
