"""Report emission: JSON, an aligned plain-text table, TSV and matplotlib figures."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# keys kept out of the JSON (live objects attached by the protocols)
_LIVE = ("encoder", "tuner")


def _columns(rows: Sequence[dict]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.4f}" if abs(v) < 1e5 else f"{v:.4g}"
    return str(v)


def format_table(rows: Sequence[dict]) -> str:
    """Left-aligned first column, right-aligned values, one header line."""
    if not rows:
        return "(no rows)\n"
    cols = _columns(rows)
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]

    def line(vals):
        parts = [vals[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(vals[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    out = [line(cols), line(["-" * w for w in widths])]
    out += [line(row) for row in cells]
    return "\n".join(out) + "\n"


def format_tsv(rows: Sequence[dict]) -> str:
    cols = _columns(rows)
    lines = ["\t".join(cols)] + ["\t".join(_fmt(r.get(c, "")) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def json_ready(report: dict) -> dict:
    return {k: v for k, v in report.items() if k not in _LIVE}


def _numeric_columns(rows: Sequence[dict]) -> list[str]:
    return [c for c in _columns(rows) if c != "name" and all(isinstance(r.get(c), (int, float)) for r in rows)]


def plot_metrics(rows: Sequence[dict], path: Path, title: str = "", metrics: Sequence[str] | None = None) -> Path | None:
    """Grouped bars: one group per metric, one bar per row."""
    metrics = list(metrics) if metrics is not None else _numeric_columns(rows)
    if not rows or not metrics:
        return None
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(metrics) * max(1, len(rows)) / 2), 3.2))
    width = 0.8 / len(rows)
    for k, r in enumerate(rows):
        xs = [m + (k - (len(rows) - 1) / 2) * width for m in range(len(metrics))]
        ax.bar(xs, [float(r[m]) for m in metrics], width, label=str(r.get("name", k)))
    ax.set_xticks(range(len(metrics)))
    ax.set_xticklabels(metrics)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_curves(rows: Sequence[dict], path: Path, keys: Sequence[str], title: str = "") -> Path | None:
    """Line per key over the row order (e.g. per-epoch losses)."""
    keys = [k for k in keys if rows and all(isinstance(r.get(k), (int, float)) for r in rows)]
    if not keys:
        return None
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for k in keys:
        ax.plot(range(1, len(rows) + 1), [r[k] for r in rows], marker="o", label=k)
    ax.set_xlabel("epoch")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_report(report: dict, out_dir: str | Path, stem: str | None = None, figures: bool = True) -> dict[str, Path]:
    """Write ``<stem>.json``, ``<stem>.txt`` (aligned table), ``<stem>.tsv`` and a PNG figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or report["command"]
    rows = report["rows"]
    paths = {
        "json": out / f"{stem}.json",
        "table": out / f"{stem}.txt",
        "tsv": out / f"{stem}.tsv",
    }
    paths["json"].write_text(json.dumps(json_ready(report), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    paths["table"].write_text(format_table(rows), encoding="utf-8")
    paths["tsv"].write_text(format_tsv(rows), encoding="utf-8")
    if figures:
        png = out / f"{stem}.png"
        if report["command"] == "pretrain":
            fig = plot_curves(rows, png, ("l_con", "l_kg", "total"), "pre-training loss")
        elif report["command"] == "census":
            fig = plot_metrics(rows, png, "trainable parameters", ["trainable"])
        else:
            fig = plot_metrics(rows, png, report["command"])
        if fig is not None:
            paths["figure"] = fig
    return paths
