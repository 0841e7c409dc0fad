"""Deterministic SVG figures from danet CSV exports.

All rendering is read-only over the inputs and byte-reproducible: fixed
style, fixed svg hash salt, no timestamps. Each kind validates its schema
and raises a named-column error on mismatch.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "daplots"

KINDS = ("hops", "delays", "netmap", "tandem", "ksweep")

SCHEMAS = {
    "hops": ["commodity", "hops", "count"],
    "delays": ["commodity", "delay_slots", "count"],
    "netmap": ["commodity", "from", "to", "r_hat"],
    "ksweep": ["policy", "K", "mean_delay"],
}


@dataclass
class FigureSpec:
    kind: str
    inputs: list[str]
    output: str
    log_y: bool = False
    grid_side: int | None = None  # netmap layout; inferred when omitted
    labels: list[str] | None = None


@dataclass
class RenderResult:
    path: str
    series: dict = field(default_factory=dict)


def _read_rows(path: str, expected: list[str] | None) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        if expected is not None:
            missing = [c for c in expected if c not in header]
            if missing:
                raise ValueError(
                    f"{path}: missing columns {missing}; expected {expected}"
                )
        return list(reader)


def _save(fig, path: str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _histogram_series(rows, value_col):
    merged: dict[int, int] = {}
    for row in rows:
        v = int(row[value_col])
        merged[v] = merged.get(v, 0) + int(row["count"])
    return sorted(merged.items())


def _label_for(spec: FigureSpec, idx: int) -> str:
    if spec.labels and idx < len(spec.labels):
        return spec.labels[idx]
    stem = os.path.basename(spec.inputs[idx])
    return os.path.splitext(stem)[0]


def _render_hist_overlay(spec: FigureSpec, value_col: str, x_label: str) -> RenderResult:
    fig, ax = plt.subplots(figsize=(6, 4))
    series = {}
    for idx, path in enumerate(spec.inputs):
        rows = _read_rows(path, SCHEMAS[spec.kind])
        pts = _histogram_series(rows, value_col)
        label = _label_for(spec, idx)
        series[label] = pts
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    drawstyle="steps-mid", label=label)
    ax.set_xlabel(x_label)
    ax.set_ylabel("packets")
    if spec.log_y:
        ax.set_yscale("log")
    if any(series.values()):
        ax.legend()
    _save(fig, spec.output)
    return RenderResult(spec.output, series)


def _render_netmap(spec: FigureSpec) -> RenderResult:
    rows = []
    for path in spec.inputs:
        rows.extend(_read_rows(path, SCHEMAS["netmap"]))
    nodes = {int(r["from"]) for r in rows} | {int(r["to"]) for r in rows}
    side = spec.grid_side or (math.isqrt(max(nodes)) + 1 if nodes else 1)
    pos = {n: (n % side, -(n // side)) for n in nodes}
    fig, ax = plt.subplots(figsize=(5, 5))
    commodities = sorted({int(r["commodity"]) for r in rows})
    cmap = plt.get_cmap("tab10")
    series = {}
    for ci, cid in enumerate(commodities):
        edges = [
            (int(r["from"]), int(r["to"]), float(r["r_hat"]))
            for r in rows
            if int(r["commodity"]) == cid
        ]
        series[cid] = sorted(edges)
        for i, j, rate in edges:
            (x0, y0), (x1, y1) = pos[i], pos[j]
            ax.annotate(
                "",
                xy=(x1, y1),
                xytext=(x0, y0),
                arrowprops=dict(
                    arrowstyle="-|>",
                    lw=0.5 + 3.0 * rate,
                    color=cmap(ci % 10),
                    shrinkA=8,
                    shrinkB=8,
                ),
            )
    for n, (x, y) in sorted(pos.items()):
        ax.plot([x], [y], "o", color="0.3", ms=10)
        ax.annotate(str(n), (x, y), ha="center", va="center",
                    fontsize=6, color="white")
    ax.set_aspect("equal")
    ax.set_axis_off()
    _save(fig, spec.output)
    return RenderResult(spec.output, series)


def _render_tandem(spec: FigureSpec) -> RenderResult:
    rows = _read_rows(spec.inputs[0], None)
    if not rows or "a" not in rows[0]:
        raise ValueError(f"{spec.inputs[0]}: missing columns ['a', 'pbar_*']")
    cols = [c for c in rows[0] if c.startswith("pbar_")]
    if not cols:
        raise ValueError(f"{spec.inputs[0]}: missing columns ['pbar_*']")
    cols.sort(key=lambda c: int(c.split("_")[1]))
    a = [float(r["a"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    series = {}
    for c in cols:
        ys = [float(r[c]) for r in rows]
        series[c] = list(zip(a, ys))
        ax.plot(a, ys, marker="o", ms=3, label=f"node {c.split('_')[1]}")
    ax.set_xlabel("arrival probability a")
    ax.set_ylabel("mean queue length")
    if spec.log_y:
        ax.set_yscale("log")
    ax.legend()
    _save(fig, spec.output)
    return RenderResult(spec.output, series)


def _render_ksweep(spec: FigureSpec) -> RenderResult:
    rows = []
    for path in spec.inputs:
        rows.extend(_read_rows(path, SCHEMAS["ksweep"]))
    policies = sorted({r["policy"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    series = {}
    for policy in policies:
        pts = sorted(
            (float(r["K"]), float(r["mean_delay"]))
            for r in rows
            if r["policy"] == policy
        )
        series[policy] = pts
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="s", label=policy)
    ax.set_xlabel("K")
    ax.set_ylabel("mean end-to-end delay (slots)")
    if spec.log_y:
        ax.set_yscale("log")
    if policies:
        ax.legend()
    _save(fig, spec.output)
    return RenderResult(spec.output, series)


def render(spec: FigureSpec) -> RenderResult:
    """Render one figure; returns the output path plus the plotted series."""
    if spec.kind not in KINDS:
        raise ValueError(f"unknown figure kind {spec.kind!r}; choose from {KINDS}")
    if not spec.inputs:
        raise ValueError("at least one input CSV is required")
    if spec.kind == "hops":
        return _render_hist_overlay(spec, "hops", "hop count")
    if spec.kind == "delays":
        return _render_hist_overlay(spec, "delay_slots", "end-to-end delay (slots)")
    if spec.kind == "netmap":
        return _render_netmap(spec)
    if spec.kind == "tandem":
        return _render_tandem(spec)
    return _render_ksweep(spec)
