"""Deterministic SVG plots from the CSV artifacts.

Fixed figure size, a fixed SVG hash salt and no date metadata make the output
a pure function of the CSV contents.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ContractViolation  # noqa: E402

PLOT_KINDS = ("sweep-curve", "alignment-histogram", "sensitivity-bars", "robustness-curve")
REQUIRED = {
    "sweep-curve": ("point_id", "seed", "p", "input_mode", "in_domain_dice", "ood_dice"),
    "alignment-histogram": ("step", "cosine", "norm_joint", "norm_stable"),
    "sensitivity-bars": ("label", "delta_drop_image", "delta_drop_reps"),
    "robustness-curve": ("kind", "level", "dice"),
}
FIGSIZE = (6.0, 4.0)
HIST_BINS = 20


def read_rows(text):
    reader = csv.DictReader(io.StringIO(text))
    return list(reader.fieldnames or ()), list(reader)


def check_columns(kind, columns):
    if kind not in PLOT_KINDS:
        raise ContractViolation(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    missing = [c for c in REQUIRED[kind] if c not in columns]
    if missing:
        raise ContractViolation(f"{kind} plot needs columns missing from the CSV: {missing}")


def _float(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def histogram_counts(values, bins=HIST_BINS):
    """Counts over [-1, 1] in ``bins`` equal bins; NaN values are skipped."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    counts, edges = np.histogram(np.clip(v, -1.0, 1.0), bins=bins, range=(-1.0, 1.0))
    return counts, edges


def _sweep(ax, rows, metric):
    series = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r["seed"] == "summary" or r.get("status", "ok") != "ok":
            continue
        series[r["input_mode"]][_float(r["p"])].append(_float(r[metric]))
    for mode in sorted(series):
        ps = sorted(series[mode])
        med = [float(np.nanmedian(series[mode][p])) for p in ps]
        ax.plot(ps, med, marker="o", label=mode)
    ax.set_xlabel("dropout probability p")
    ax.set_ylabel(f"median {metric}")
    ax.set_ylim(-0.02, 1.02)
    if series:
        ax.legend(loc="best")


def _alignment(ax, rows):
    values = [_float(r["cosine"]) for r in rows]
    counts, edges = histogram_counts(values)
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
    ax.axvline(0.0, color="gray", linestyle="--")
    ax.set_xlabel("cosine(grad R_11, grad R_01) on W_s")
    ax.set_ylabel("count")
    skipped = len(values) - int(counts.sum())
    ax.set_title(f"n={int(counts.sum())}" + (f", {skipped} degenerate" if skipped else ""))


def _sensitivity(ax, rows):
    labels = [r["label"] for r in rows]
    x = np.arange(len(labels))
    ax.bar(x - 0.2, [_float(r["delta_drop_image"]) for r in rows], 0.4, label="drop image")
    ax.bar(x + 0.2, [_float(r["delta_drop_reps"]) for r in rows], 0.4, label="drop reps")
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set_ylabel("Dice drop vs full input")
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.legend(loc="best")


def _robustness(ax, rows):
    series = defaultdict(list)
    for r in rows:
        key = r["kind"] if not r.get("label") else f"{r['label']} {r['kind']}"
        series[key].append((_float(r["level"]), _float(r["dice"])))
    for key in sorted(series):
        pts = sorted(series[key])
        ax.plot([a for a, _ in pts], [b for _, b in pts], marker="o", label=key)
    ax.axvline(0.0, color="gray", linestyle="--")
    ax.set_xlabel("corruption level / noise alpha")
    ax.set_ylabel("Dice")
    if series:
        ax.legend(loc="best")


def render(text, kind, metric="in_domain_dice"):
    """SVG document (str) for CSV ``text``."""
    columns, rows = read_rows(text)
    check_columns(kind, columns)
    with plt.rc_context({"svg.hashsalt": "dropgen-lab", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        try:
            if kind == "sweep-curve":
                if metric not in columns:
                    raise ContractViolation(f"sweep CSV has no column {metric!r}")
                _sweep(ax, rows, metric)
            elif kind == "alignment-histogram":
                _alignment(ax, rows)
            elif kind == "sensitivity-bars":
                _sensitivity(ax, rows)
            else:
                _robustness(ax, rows)
            fig.tight_layout()
            buf = io.StringIO()
            fig.savefig(buf, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return buf.getvalue()
