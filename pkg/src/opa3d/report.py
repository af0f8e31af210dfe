"""Run summaries: SVG learning curves, mean±std tables and displacement histograms.

SVGs are built with :mod:`xml.etree` so they are always well-formed.
"""
from __future__ import annotations

import csv
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

SVG_NS = "http://www.w3.org/2000/svg"
WIDTH, HEIGHT, PAD = 480, 300, 40
AXIS_NAMES = ("x", "y", "z")


def read_metrics(path) -> list[dict]:
    """Rows of a metrics CSV with numeric cells parsed and blanks as None."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                row[k] = float(v) if v not in ("", None) else None
            rows.append(row)
    return rows


def final_map(rows) -> dict:
    """Last logged mAP@0.25 / mAP@0.5 of a run (None when never evaluated)."""
    out = {"mAP@0.25": None, "mAP@0.5": None}
    for row in rows:
        for key in out:
            if row.get(key) is not None:
                out[key] = row[key]
    return out


def _svg(width=WIDTH, height=HEIGHT):
    root = ET.Element("svg", xmlns=SVG_NS, width=str(width), height=str(height),
                      viewBox=f"0 0 {width} {height}")
    ET.SubElement(root, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    return root


def _text(root, x, y, s, size=11, anchor="start", fill="black"):
    t = ET.SubElement(root, "text", x=f"{x:.1f}", y=f"{y:.1f}", fill=fill,
                      attrib={"font-size": str(size), "text-anchor": anchor, "font-family": "sans-serif"})
    t.text = s
    return t


def _axes(root, title, xlabel, ylabel, xlim, ylim):
    x0, y0, x1, y1 = PAD, HEIGHT - PAD, WIDTH - PAD // 2, PAD // 2
    ET.SubElement(root, "line", x1=str(x0), y1=str(y0), x2=str(x1), y2=str(y0), stroke="black")
    ET.SubElement(root, "line", x1=str(x0), y1=str(y0), x2=str(x0), y2=str(y1), stroke="black")
    _text(root, (x0 + x1) / 2, HEIGHT - 8, xlabel, anchor="middle")
    _text(root, 4, y1 - 4, ylabel)
    _text(root, (x0 + x1) / 2, 14, title, 12, "middle")
    _text(root, x0, y0 + 14, f"{xlim[0]:g}", 9, "middle")
    _text(root, x1, y0 + 14, f"{xlim[1]:g}", 9, "middle")
    _text(root, x0 - 4, y0, f"{ylim[0]:.3g}", 9, "end")
    _text(root, x0 - 4, y1 + 8, f"{ylim[1]:.3g}", 9, "end")

    def to_px(x, y):
        fx = (x - xlim[0]) / (xlim[1] - xlim[0] or 1.0)
        fy = (y - ylim[0]) / (ylim[1] - ylim[0] or 1.0)
        return x0 + fx * (x1 - x0), y0 - fy * (y0 - y1)

    return to_px


COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def curve_svg(series: dict, title: str, ylabel: str) -> str:
    """Polyline plot of ``{name: [(epoch, value), ...]}``."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("nothing to plot")
    xs, ys = np.array([p[0] for p in pts]), np.array([p[1] for p in pts])
    root = _svg()
    to_px = _axes(root, title, "epoch", ylabel, (xs.min(), max(xs.max(), xs.min() + 1)),
                  (min(0.0, ys.min()), ys.max() if ys.max() > ys.min() else ys.min() + 1))
    for i, (name, s) in enumerate(sorted(series.items())):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{px:.1f},{py:.1f}" for px, py in (to_px(x, y) for x, y in s))
        ET.SubElement(root, "polyline", points=coords, fill="none", stroke=color,
                      attrib={"stroke-width": "1.5"})
        _text(root, WIDTH - PAD, PAD + 14 * i, name, 10, "end", fill=color)
    return ET.tostring(root, encoding="unicode")


def histogram_svg(edges, counts, axis_name: str) -> str:
    """Bar chart of one displacement-ratio histogram (ratios shown in percent)."""
    counts = np.asarray(counts)
    root = _svg()
    top = max(int(counts.max()) if counts.size else 0, 1)
    to_px = _axes(root, f"{axis_name}-direction displacement", "ratio to box size (%)", "points",
                  (edges[0] * 100, edges[-1] * 100), (0, top))
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        if c == 0:
            continue
        x0, y0 = to_px(lo * 100, c)
        x1, y1 = to_px(hi * 100, 0)
        ET.SubElement(root, "rect", x=f"{x0:.1f}", y=f"{y0:.1f}", width=f"{max(x1 - x0, 0.5):.1f}",
                      height=f"{y1 - y0:.1f}", fill="#1f77b4",
                      attrib={"data-lo": repr(float(lo)), "data-hi": repr(float(hi)), "data-count": str(int(c))})
    return ET.tostring(root, encoding="unicode")


def write_histograms(edges, counts, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for axis, name in enumerate(AXIS_NAMES):
        path = out_dir / f"hist_{name}.svg"
        path.write_text(histogram_svg(edges, counts[axis], name))
        paths.append(path)
    return paths


# runs and tables

def discover_runs(runs_dir) -> list[dict]:
    """Every sub-directory holding a metrics.csv, with its manifest if any."""
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        raise FileNotFoundError(f"runs directory not found: {runs_dir}")
    runs = []
    for metrics in sorted(runs_dir.rglob("metrics.csv")):
        run_dir = metrics.parent
        manifest = {}
        if (run_dir / "manifest.json").exists():
            manifest = json.loads((run_dir / "manifest.json").read_text())
        rows = read_metrics(metrics)
        result = final_map(rows)
        if (run_dir / "eval.json").exists():
            ev = json.loads((run_dir / "eval.json").read_text())
            result = {k: ev.get(k) for k in result}
        runs.append({"dir": run_dir, "name": str(run_dir.relative_to(runs_dir)), "manifest": manifest,
                     "rows": rows, "result": result, "group": run_group(manifest, run_dir.name)})
    if not runs:
        raise ValueError(f"no runs (metrics.csv files) under {runs_dir}")
    return runs


def run_group(manifest: dict, fallback: str) -> str:
    """Runs differing only by seed share a group."""
    if manifest.get("label"):
        return manifest["label"]
    if manifest.get("command"):
        ablation = manifest.get("ablation") or "full"
        return f"{manifest['command']}:{ablation}"
    return fallback


def mean_std(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def summary_table(runs) -> list[dict]:
    groups: dict[str, list] = {}
    for r in runs:
        groups.setdefault(r["group"], []).append(r)
    table = []
    for name in sorted(groups):
        rs = groups[name]
        row = {"group": name, "runs": len(rs)}
        for key in ("mAP@0.25", "mAP@0.5"):
            m, s = mean_std(r["result"][key] for r in rs)
            row[key] = (100 * m, 100 * s)
        table.append(row)
    return table


def format_table(table) -> str:
    """Markdown table with mAP in percent as mean±std."""
    lines = ["| run | n | mAP@0.25 | mAP@0.5 |", "|---|---|---|---|"]
    for row in table:
        cells = [f"{row[k][0]:.1f}±{row[k][1]:.1f}" for k in ("mAP@0.25", "mAP@0.5")]
        lines.append(f"| {row['group']} | {row['runs']} | {cells[0]} | {cells[1]} |")
    return "\n".join(lines) + "\n"


def write_report(runs_dir, out_dir) -> dict:
    """Curves per loss column, a summary table (markdown + CSV); returns written paths."""
    runs = discover_runs(runs_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for column in ("L_D", "L_A", "L_l", "L_u", "mAP@0.25"):
        series = {r["name"]: [(row["epoch"], row[column]) for row in r["rows"] if row.get(column) is not None]
                  for r in runs}
        series = {k: v for k, v in series.items() if v}
        if series:
            path = out_dir / f"curve_{column.replace('@', '_')}.svg"
            path.write_text(curve_svg(series, column, column))
            written[column] = path
    table = summary_table(runs)
    (out_dir / "summary.md").write_text(format_table(table))
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "runs", "mAP@0.25_mean", "mAP@0.25_std", "mAP@0.5_mean", "mAP@0.5_std"])
        for row in table:
            w.writerow([row["group"], row["runs"], *row["mAP@0.25"], *row["mAP@0.5"]])
    written["summary"] = out_dir / "summary.md"
    written["table"] = table
    return written
