"""Experiment orchestration shared by the command line and the acceptance tests."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Callable

from .config import ExperimentConfig, dump_config
from .pipeline import CycleReport, Flags, PretrainedModels, TrainConfig, pretrain, run_collaboration_cycle
from .snapshot import save_snapshot
from .synthdata import DomainDataset, TargetStream, build_benchmark

log = logging.getLogger(__name__)

ABLATION_ROWS: tuple[tuple[str, Flags], ...] = (
    ("none", Flags(False, False, False)),
    ("dqfa", Flags(True, False, False)),
    ("tiafa", Flags(False, True, False)),
    ("dqfa+tiafa", Flags(True, True, False)),
    ("full", Flags(True, True, True)),
)
METRICS = ("pseudo_label_map", "edge_map")
METRIC_TITLES = {"pseudo_label_map": "Pseudo-label mAP", "edge_map": "Edge model mAP"}


@dataclass
class RowResult:
    label: str
    seed: int
    reports: list[CycleReport]

    def records(self) -> list[dict]:
        return [{"row": self.label, **r.to_dict()} for r in self.reports]


def estimate_steps(cfg: ExperimentConfig) -> dict[str, int]:
    """Optimizer steps per seed, for ``--dry-run``."""
    tc, dc = cfg.train, cfg.data
    n_targets = len(dc.target_specs())
    n_adapt = int(round(dc.n_target * dc.adapt_fraction))
    src_batches = math.ceil(dc.n_source / tc.batch_size)
    adapt_batches = math.ceil(n_adapt / tc.batch_size)
    per_epoch = max(src_batches, adapt_batches) if tc.flags.adversarial else src_batches
    pre = src_batches * (tc.pretrain_epochs + tc.edge_pretrain_epochs)
    adapt = per_epoch * tc.adapt_epochs * n_targets if tc.adapt else 0
    edge = adapt_batches * tc.edge_epochs * n_targets
    return {"pretrain": pre, "adapt": adapt, "edge": edge, "total_per_seed": pre + adapt + edge,
            "total": (pre + adapt + edge) * len(cfg.seeds)}


class Experiment:
    """Benchmark data plus cached source pre-training, one entry per seed."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.source, self.streams = build_benchmark(cfg.data.benchmark())
        self._pretrained: dict[int, PretrainedModels] = {}

    def pretrained(self, seed: int) -> PretrainedModels:
        if seed not in self._pretrained:
            log.info("pre-training cloud and edge models, seed %d", seed)
            self._pretrained[seed] = pretrain(self.source, self.cfg.model, self.cfg.edge_model(), self.cfg.train, seed)
        # every run starts from its own copy of the pre-trained models
        return copy.deepcopy(self._pretrained[seed])

    def run_row(
        self,
        label: str,
        train: TrainConfig,
        seed: int,
        streams: list[TargetStream] | None = None,
        on_cycle: Callable | None = None,
    ) -> RowResult:
        models = self.pretrained(seed)
        reports = run_collaboration_cycle(self.source, streams or self.streams, models, train, seed, on_cycle)
        return RowResult(label, seed, reports)


def row_config(train: TrainConfig, flags: Flags | None) -> TrainConfig:
    """``flags=None`` is the no-update baseline: pseudo-labels from the source-only model."""
    if flags is None:
        return dataclasses.replace(train, adapt=False)
    return dataclasses.replace(train, adapt=True, flags=flags)


# ------------------------------------------------------------------ summaries

def _streams(results: list[RowResult]) -> list[str]:
    names: list[str] = []
    for res in results:
        for r in res.reports:
            if r.stream not in names:
                names.append(r.stream)
    return names


def summarize(results: list[RowResult]) -> dict:
    """``{metric: {row: {stream: mean over seeds, ..., "Mean": mean over streams}}}`` plus per-seed detail."""
    streams = _streams(results)
    labels = list(dict.fromkeys(r.label for r in results))
    out: dict = {"streams": streams, "rows": labels, "seeds": sorted({r.seed for r in results})}
    for metric in METRICS:
        table, detail = {}, {}
        for label in labels:
            rows = [r for r in results if r.label == label]
            per_stream = {}
            for s in streams:
                vals = [getattr(rep, metric) for res in rows for rep in res.reports if rep.stream == s]
                per_stream[s] = fmean(vals)
            per_stream["Mean"] = fmean(per_stream[s] for s in streams)
            table[label] = per_stream
            detail[label] = {
                str(res.seed): fmean(getattr(rep, metric) for rep in res.reports) for res in rows
            }
        out[metric] = table
        out[metric + "_per_seed"] = detail
    return out


def format_table(summary: dict, flags_columns: dict[str, Flags] | None = None) -> str:
    streams = summary["streams"]
    lines = []
    for metric in METRICS:
        lines.append(METRIC_TITLES[metric])
        head = ["row"]
        if flags_columns:
            head += ["DQFA", "TIAFA", "VPG"]
        head += streams + ["Mean"]
        rows = [head]
        for label in summary["rows"]:
            cells = [label]
            if flags_columns:
                f = flags_columns[label]
                cells += ["x" if v else "-" for v in (f.dqfa, f.tiafa, f.vpg)]
            cells += [f"{summary[metric][label][s]:.2f}" for s in streams + ["Mean"]]
            rows.append(cells)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        for r in rows:
            lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
        lines.append("")
        lines.append(f"{METRIC_TITLES[metric]} per seed (mean over streams)")
        for label in summary["rows"]:
            per_seed = summary[metric + "_per_seed"][label]
            lines.append(f"  {label}: " + ", ".join(f"seed {s} {v:.2f}" for s, v in per_seed.items()))
        lines.append("")
    return "\n".join(lines)


# ------------------------------------------------------------------ output

class RunWriter:
    """Writes reports, snapshots and summaries under one directory."""

    def __init__(self, out_dir: Path, cfg: ExperimentConfig, snapshots: bool = True):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.snapshots = snapshots
        (self.out / "config.effective.yaml").write_text(dump_config(cfg))
        self.reports_path = self.out / "reports.jsonl"
        self.reports_path.write_text("")

    def cycle_hook(self, label: str, seed: int) -> Callable:
        def hook(report: CycleReport, models: PretrainedModels) -> None:
            with self.reports_path.open("a") as fh:
                fh.write(json.dumps({"row": label, **report.to_dict()}, sort_keys=True) + "\n")
            if self.snapshots:
                path = self.out / "snapshots" / label / f"seed{seed}_cycle{report.cycle:03d}.zip"
                save_snapshot(path, models.cloud, models.edge,
                              extra={"row": label, "seed": seed, "stream": report.stream})
            log.info("%s seed %d cycle %d (%s): pseudo-label %.2f, edge %.2f", label, seed, report.cycle,
                     report.stream, report.pseudo_label_map, report.edge_map)
        return hook

    def write_summary(self, results: list[RowResult], stem: str = "summary",
                      flags_columns: dict[str, Flags] | None = None) -> dict:
        summary = summarize(results)
        if flags_columns:
            summary["flags"] = {k: dataclasses.asdict(v) for k, v in flags_columns.items()}
        (self.out / f"{stem}.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        (self.out / f"{stem}.txt").write_text(format_table(summary, flags_columns))
        return summary


def run_experiment(cfg: ExperimentConfig, out_dir: Path, compare: bool = False, snapshots: bool = True) -> dict:
    """Configured run per seed; ``compare`` adds the no-update baseline row."""
    exp = Experiment(cfg)
    writer = RunWriter(out_dir, cfg, snapshots)
    rows: list[tuple[str, Flags | None]] = []
    if compare:
        rows.append(("baseline", None))
    rows.append(("adapted" if cfg.train.adapt else "baseline", cfg.train.flags if cfg.train.adapt else None))
    results = []
    for seed in cfg.seeds:
        for label, flags in rows:
            results.append(exp.run_row(label, row_config(cfg.train, flags), seed,
                                       on_cycle=writer.cycle_hook(label, seed)))
    return writer.write_summary(results)


def run_ablation(cfg: ExperimentConfig, out_dir: Path, snapshots: bool = True) -> dict:
    """The five component combinations, in table order, over every seed."""
    exp = Experiment(cfg)
    writer = RunWriter(out_dir, cfg, snapshots)
    results = []
    for seed in cfg.seeds:
        for label, flags in ABLATION_ROWS:
            results.append(exp.run_row(label, row_config(cfg.train, flags), seed,
                                       on_cycle=writer.cycle_hook(label, seed)))
    return writer.write_summary(results, "ablation", dict(ABLATION_ROWS))


def load_reports(report_dir: Path) -> list[dict]:
    path = Path(report_dir) / "reports.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def save_datasets(cfg: ExperimentConfig, out_dir: Path) -> list[str]:
    from .synthdata import save_dataset

    source, streams = build_benchmark(cfg.data.benchmark())
    save_dataset(source, out_dir, "source")
    written = ["source"]
    for s in streams:
        save_dataset(s.adapt, out_dir, f"{s.spec.name}_adapt")
        save_dataset(s.evaluation, out_dir, f"{s.spec.name}_eval")
        written += [f"{s.spec.name}_adapt", f"{s.spec.name}_eval"]
    return written


__all__ = [
    "ABLATION_ROWS",
    "DomainDataset",
    "Experiment",
    "RowResult",
    "estimate_steps",
    "format_table",
    "run_ablation",
    "run_experiment",
    "summarize",
]
