"""Static bar charts of cycle reports."""
from __future__ import annotations

import json
from pathlib import Path
from statistics import fmean

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .runner import METRIC_TITLES, METRICS, load_reports  # noqa: E402

# Agg output carries a "Software" text chunk by default; dropping it keeps files byte-stable
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def stream_chart(records: list[dict], metric: str, path: Path) -> Path:
    """Grouped bars: one group per stream plus Mean, one bar per row label (mean over seeds)."""
    streams = list(dict.fromkeys(r["stream"] for r in records))
    labels = list(dict.fromkeys(r["row"] for r in records))
    groups = streams + ["Mean"]
    values = np.zeros((len(labels), len(groups)))
    for i, label in enumerate(labels):
        for j, s in enumerate(streams):
            values[i, j] = fmean(r[metric] for r in records if r["row"] == label and r["stream"] == s)
        values[i, -1] = values[i, :-1].mean()
    width = 0.8 / len(labels)
    x = np.arange(len(groups))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(groups)), 4.0))
    for i, label in enumerate(labels):
        ax.bar(x + (i - (len(labels) - 1) / 2) * width, values[i], width, label=label)
    ax.set_xticks(x, groups)
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 100)
    ax.set_title(METRIC_TITLES[metric])
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def ablation_chart(summary: dict, metric: str, path: Path) -> Path:
    rows = summary["rows"]
    vals = [summary[metric][r]["Mean"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(np.arange(len(rows)), vals, 0.6, color="tab:blue")
    ax.set_xticks(np.arange(len(rows)), rows)
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 100)
    ax.set_title(f"Ablation: {METRIC_TITLES[metric]}")
    fig.tight_layout()
    return _save(fig, path)


def plot_reports(report_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render every chart the report directory supports; empty input raises ``FileNotFoundError``."""
    report_dir = Path(report_dir)
    out_dir = Path(out_dir) if out_dir is not None else report_dir / "plots"
    records = load_reports(report_dir)
    if not records:
        raise FileNotFoundError(f"no cycle reports in {report_dir}")
    written = [stream_chart(records, m, out_dir / f"{m}_streams.png") for m in METRICS]
    ablation = report_dir / "ablation.json"
    if ablation.exists():
        summary = json.loads(ablation.read_text())
        written += [ablation_chart(summary, m, out_dir / f"ablation_{m}.png") for m in METRICS]
    return written
