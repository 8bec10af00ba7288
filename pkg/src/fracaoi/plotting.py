"""Static SVG plots with byte-stable output."""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .csvio import SchemaError, read_schema_csv  # noqa: E402

CONVERGENCE_SCHEMAS = ("fql-trace", "fnql-trace", "marl-metrics")
BAR_SCHEMAS = ("sweep",)


def _float(v: str) -> float:
    return float(v) if v not in ("", None) else float("nan")


def _save(fig, out) -> None:
    # fixed hash salt and no date keep the SVG bytes reproducible
    with matplotlib.rc_context({"svg.hashsalt": "fracaoi", "svg.fonttype": "none"}):
        fig.savefig(out, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_convergence(schema: str, rows: list[dict], out) -> None:
    if schema == "fql-trace":
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot([int(r["i"]) for r in rows], [_float(r["gamma"]) for r in rows], marker="o", ms=3)
        ax.set_xlabel("outer iteration")
        ax.set_ylabel("gamma")
    elif schema == "fnql-trace":
        fig, ax = plt.subplots(figsize=(5, 3.2))
        by_agent = defaultdict(list)
        for r in rows:
            by_agent[int(r["agent"])].append((int(r["i"]), _float(r["gamma"])))
        for m in sorted(by_agent):
            i, g = zip(*by_agent[m])
            ax.plot(i, g, marker="o", ms=3, label=f"agent {m}")
        ax.set_xlabel("outer iteration")
        ax.set_ylabel("gamma")
        ax.legend()
    else:
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.2))
        by_dev = defaultdict(list)
        for r in rows:
            by_dev[int(r["device"])].append(r)
        for m in sorted(by_dev):
            rs = by_dev[m]
            ev = [(int(r["episode"]), _float(r["eval_avg_aoi"])) for r in rs if r["eval_avg_aoi"] != ""]
            if ev:
                a1.plot(*zip(*ev), label=f"device {m}")
            gm = [(int(r["episode"]), _float(r["gamma"])) for r in rs if r["gamma"] != ""]
            if gm:
                a2.plot(*zip(*gm), label=f"device {m}")
        a1.set_xlabel("episode")
        a1.set_ylabel("evaluated average AoI")
        a2.set_xlabel("episode")
        a2.set_ylabel("gamma")
        a1.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out)


def plot_bars(rows: list[dict], out) -> None:
    """Grouped bars of seed-mean AoI per (value, mode), error bars = seed std."""
    values = sorted({_float(r["value"]) for r in rows})
    modes = sorted({r["mode"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(1, len(modes))
    x = np.arange(len(values))
    for k, mode in enumerate(modes):
        means, errs = [], []
        for v in values:
            vals = [_float(r["avg_aoi"]) for r in rows if r["mode"] == mode and _float(r["value"]) == v]
            means.append(np.mean(vals) if vals else np.nan)
            errs.append(np.std(vals) if len(vals) > 1 else 0.0)
        ax.bar(x + (k - (len(modes) - 1) / 2) * width, means, width, yerr=errs, capsize=2, label=mode)
    ax.set_xticks(x, [f"{v:g}" for v in values])
    ax.set_xlabel(rows[0]["axis"])
    ax.set_ylabel("average AoI")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out)


def plot_csv(path, kind: str, out) -> None:
    """Render ``path`` as ``kind`` (convergence or bars) into SVG ``out``."""
    schema, _header, rows = read_schema_csv(path)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    if kind == "convergence":
        if schema not in CONVERGENCE_SCHEMAS:
            raise SchemaError(f"convergence plot needs one of {CONVERGENCE_SCHEMAS}, got {schema}")
        plot_convergence(schema, rows, out)
    elif kind == "bars":
        if schema not in BAR_SCHEMAS:
            raise SchemaError(f"bar plot needs a sweep CSV, got {schema}")
        plot_bars(rows, out)
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
