"""Report emission for sweep rows: CSV, markdown tables, JSON and an SVG chart.

Everything written here is a pure function of the rows and the config, so two
sweeps with the same inputs produce byte-identical files. Wall-clock timings
go to a separate ``timing.json`` that is not part of the manifest hashes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Sequence

from . import __version__
from .harness import ExperimentConfig, ReportRow
from .scene import CLASSES
from .seeding import scene_seed

FORMATS = ("csv", "markdown", "json", "svg")
FILE_NAMES = {"csv": "results.csv", "markdown": "results.md", "json": "results.json", "svg": "map_curve.svg"}
SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _classes(rows: Sequence[ReportRow]) -> list[str]:
    seen = dict.fromkeys(c for r in rows for c in r.per_class_ap)
    return [c for c in CLASSES if c in seen] + [c for c in seen if c not in CLASSES]


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    classes = _classes(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "occluded_sensor", "severity", "mAP", "NDS"] + [f"AP_{c}" for c in classes])
    for r in rows:
        w.writerow([r.sensor_mode, r.occluded_sensor, r.severity, repr(r.mAP), repr(r.NDS)]
                   + [repr(r.per_class_ap.get(c, 0.0)) for c in classes])
    return buf.getvalue()


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _sev(s) -> str:
    if isinstance(s, str):
        return Path(s).name
    return f"{100.0 * s:g}%"


def rows_to_markdown(rows: Sequence[ReportRow]) -> str:
    lines = ["## Detection under different sensor occlusion settings", "",
             "| Sensor | Severity | mAP% | NDS% |", "|---|---|---:|---:|"]
    for r in rows:
        sev = "clean" if r.occluded_sensor == "none" else _sev(r.severity)
        lines.append(f"| {r.label} | {sev} | {_pct(r.mAP)} | {_pct(r.NDS)} |")
    for target, title in (("lidar", "LiDAR-only vs. Camera+LiDAR occlusion in terms of mAP and NDS"),
                          ("camera", "Camera-only vs. Camera+LiDAR occlusion in terms of mAP and NDS")):
        modes = list(dict.fromkeys(r.sensor_mode for r in rows if r.occluded_sensor == target))
        if not modes:
            continue
        levels = list(dict.fromkeys(r.severity for r in rows if r.occluded_sensor == target))
        other = "Camera" if target == "lidar" else "LiDAR"
        lines += ["", f"## {title}", "",
                  f"{other} is clean, {'LiDAR' if target == 'lidar' else 'camera'} is occluded.", "",
                  "| Occluded Sensor | " + " | ".join(f"{_sev(s)} mAP | {_sev(s)} NDS" for s in levels) + " |",
                  "|---|" + "---:|---:|" * len(levels)]
        names = {"C": "Camera", "L": "LiDAR", "C+L": "Camera + LiDAR"}
        for mode in modes:
            by_sev = {r.severity: r for r in rows if r.occluded_sensor == target and r.sensor_mode == mode}
            cells = []
            for s in levels:
                r = by_sev.get(s)
                cells += [_pct(r.mAP), _pct(r.NDS)] if r else ["", ""]
            lines.append(f"| {names[mode]} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def rows_to_json(rows: Sequence[ReportRow], config: ExperimentConfig | None = None) -> str:
    out = {"format": "bevbench-report/1",
           "config": config.to_dict() if config is not None else None,
           "rows": []}
    for r in rows:
        out["rows"].append({
            "label": r.label, "mode": r.sensor_mode, "occluded_sensor": r.occluded_sensor,
            "severity": r.severity, "mAP": r.mAP, "NDS": r.NDS, "per_class_ap": r.per_class_ap,
            "n_scenes": r.n_scenes, "eval": r.result.to_dict() if r.result is not None else None})
    return json.dumps(out, indent=1, sort_keys=True) + "\n"


def curve_series(rows: Sequence[ReportRow]) -> list[tuple[str, list[tuple[float, float]]]]:
    """(name, [(severity, mAP), ...]) per (mode, occluded sensor) with numeric severities.

    A mode's clean row is used as the severity-0 point when the sweep has none.
    """
    series = []
    for mode in dict.fromkeys(r.sensor_mode for r in rows):
        clean = next((r for r in rows if r.sensor_mode == mode and r.occluded_sensor == "none"), None)
        for target in ("lidar", "camera"):
            pts = {float(r.severity): r.mAP for r in rows
                   if r.sensor_mode == mode and r.occluded_sensor == target and not isinstance(r.severity, str)}
            if not pts:
                continue
            if clean is not None and 0.0 not in pts:
                pts[0.0] = clean.mAP
            name = f"{mode}, {'L' if target == 'lidar' else 'C'}-occluded"
            series.append((name, sorted(pts.items())))
    return series


def rows_to_svg(rows: Sequence[ReportRow], width: int = 520, height: int = 340) -> str:
    """Severity (x) versus mAP (y) line chart.

    Polylines live in a y-up plot frame (``scale(1,-1)``), so a decreasing
    mAP curve has non-increasing y coordinates in its ``points`` attribute.
    """
    left, right, top, bottom = 56, 150, 20, 44
    pw, ph = width - left - right, height - top - bottom
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    for k in range(6):
        v = k / 5
        y = top + ph - v * ph
        x = left + v * pw
        parts.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{v:.1f}</text>')
        parts.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle">{v:.1f}</text>')
    parts.append(f'<text x="{left + pw / 2:.2f}" y="{height - 8}" text-anchor="middle">occlusion severity</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.2f}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2:.2f})">mAP</text>')
    parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
    parts.append(f'<g transform="translate({left} {top + ph}) scale(1 -1)">')
    series = curve_series(rows)
    for n, (name, pts) in enumerate(series):
        color = SERIES_COLORS[n % len(SERIES_COLORS)]
        coords = " ".join(f"{s * pw:.2f},{m * ph:.2f}" for s, m in pts)
        parts.append(f'<polyline data-series="{name}" fill="none" stroke="{color}" stroke-width="2" '
                     f'points="{coords}"/>')
    parts.append("</g>")
    for n, (name, _) in enumerate(series):
        color = SERIES_COLORS[n % len(SERIES_COLORS)]
        y = top + 10 + 16 * n
        parts.append(f'<line x1="{left + pw + 10}" y1="{y}" x2="{left + pw + 30}" y2="{y}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 34}" y="{y + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(rows: Sequence[ReportRow], out_dir, formats: Sequence[str] = FORMATS,
                config: ExperimentConfig | None = None) -> dict[str, Path]:
    """Write the requested formats plus ``manifest.json`` and ``timing.json``."""
    if not rows:
        raise ValueError("no rows to report")
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}; choose from {FORMATS}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    render = {"csv": lambda: rows_to_csv(rows), "markdown": lambda: rows_to_markdown(rows),
              "json": lambda: rows_to_json(rows, config), "svg": lambda: rows_to_svg(rows)}
    written = {}
    hashes = {}
    for fmt in FORMATS:
        if fmt not in formats:
            continue
        text = render[fmt]()
        path = out / FILE_NAMES[fmt]
        path.write_text(text)
        written[fmt] = path
        hashes[path.name] = hashlib.sha256(text.encode("utf-8")).hexdigest()
    manifest = {"format": "bevbench-manifest/1", "version": __version__, "files": hashes}
    if config is not None:
        manifest["config"] = config.to_dict()
        manifest["scene_seeds"] = [scene_seed(config.master_seed, i) for i in range(config.n_scenes)]
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    written["manifest"] = path
    timing = [{"label": r.label, "severity": r.severity, "wall_time": r.wall_time} for r in rows]
    path = out / "timing.json"
    path.write_text(json.dumps(timing, indent=1) + "\n")
    written["timing"] = path
    return written
