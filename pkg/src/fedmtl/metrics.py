"""Accuracy, weighted averages, confusion matrices and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REPORT_SCHEMA_VERSION = 1
SUMMARY_HEADER = ["regime", "stage", "task", "weighted_accuracy", "n_total"]
ALL_TASKS = "all"


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.count_nonzero(p == y)) / p.size


def weighted_average_accuracy(entries) -> float:
    """``sum(acc * n) / sum(n)`` over ``(acc, n)`` pairs."""
    entries = list(entries)
    if not entries:
        raise ValueError("weighted average of no entries")
    if any(n < 1 for _, n in entries):
        raise ValueError("weights must be >= 1")
    total = sum(n for _, n in entries)
    return sum(a * n for a, n in entries) / total


@dataclass
class ConfusionMatrix:
    task: str
    counts: np.ndarray  # rows = true class, cols = predicted

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / float(self.counts.sum())


def confusion(predictions, labels, C: int, task: str = "") -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if np.any((p < 0) | (p >= C)) or np.any((y < 0) | (y >= C)):
        raise ValueError(f"class index out of range [0, {C})")
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (y, p), 1)
    return ConfusionMatrix(task, counts)


@dataclass
class TaskResult:
    accuracy: float
    n: int
    confusion: list[list[int]]


@dataclass
class StageResult:
    stage: str
    clients: dict[str, dict[str, TaskResult]] = field(default_factory=dict)

    def tasks(self) -> list[str]:
        seen: list[str] = []
        for per_task in self.clients.values():
            for t in per_task:
                if t not in seen:
                    seen.append(t)
        return seen

    def entries(self, task: str) -> list[tuple[float, int]]:
        out = []
        for cid in sorted(self.clients):
            r = self.clients[cid].get(task)
            if r is not None:
                out.append((r.accuracy, r.n))
        return out

    def weighted(self, task: str) -> tuple[float, int]:
        """Weighted accuracy and total weight; ``"all"`` pools every (client, task)."""
        if task == ALL_TASKS:
            entries = [(r.accuracy, r.n) for cid in sorted(self.clients)
                       for r in self.clients[cid].values()]
        else:
            entries = self.entries(task)
        return weighted_average_accuracy(entries), sum(n for _, n in entries)


@dataclass
class MetricsReport:
    regime: str
    stages: list[StageResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def stage(self, name: str) -> StageResult:
        for s in self.stages:
            if s.stage == name:
                return s
        raise KeyError(name)

    @property
    def final(self) -> StageResult:
        return self.stages[-1]

    def to_dict(self) -> dict:
        stages = []
        for s in self.stages:
            weighted = {}
            for t in s.tasks() + [ALL_TASKS]:
                acc, n = s.weighted(t)
                weighted[t] = {"accuracy": acc, "n_total": n}
            stages.append({
                "stage": s.stage,
                "clients": {cid: {t: {"accuracy": r.accuracy, "n": r.n, "confusion": r.confusion}
                                  for t, r in per.items()}
                            for cid, per in s.clients.items()},
                "weighted": weighted,
            })
        return {"regime": self.regime, "metadata": self.metadata, "stages": stages}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        stages = []
        for s in d["stages"]:
            clients = {cid: {t: TaskResult(r["accuracy"], r["n"], r["confusion"]) for t, r in per.items()}
                       for cid, per in s["clients"].items()}
            stages.append(StageResult(s["stage"], clients))
        return cls(d["regime"], stages, d.get("metadata", {}))


def summary_rows(reports: list[MetricsReport]) -> list[list[str]]:
    rows = []
    for rep in reports:
        for s in rep.stages:
            for t in s.tasks() + [ALL_TASKS]:
                acc, n = s.weighted(t)
                rows.append([rep.regime, s.stage, t, f"{acc:.4f}", str(n)])
    return rows


def emit_report(reports, out_dir) -> list[Path]:
    """Write ``report.json``, ``summary.csv`` and per-client confusion CSVs."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]}
    path = out / "report.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)
    path = out / "summary.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(summary_rows(reports))
    written.append(path)
    cdir = out / "confusion"
    for rep in reports:
        final = rep.final
        for cid in sorted(final.clients):
            for task, r in final.clients[cid].items():
                path = cdir / f"{rep.regime}__{cid}__{task}.csv"
                path.parent.mkdir(parents=True, exist_ok=True)
                with path.open("w", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["true\\pred"] + [str(j) for j in range(len(r.confusion))])
                    for i, row in enumerate(r.confusion):
                        w.writerow([str(i)] + [str(v) for v in row])
                written.append(path)
    return written


def load_report(path) -> list[MetricsReport]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')}")
    return [MetricsReport.from_dict(d) for d in doc["reports"]]


def format_table(reports: list[MetricsReport]) -> str:
    """Regimes (and stages) as rows, tasks as columns."""
    tasks: list[str] = []
    for rep in reports:
        for s in rep.stages:
            for t in s.tasks():
                if t not in tasks:
                    tasks.append(t)
    tasks.append(ALL_TASKS)
    lines = []
    label_w = max([len(f"{r.regime}/{s.stage}") for r in reports for s in r.stages] + [12])
    lines.append(f"{'regime/stage':<{label_w}}  " + "  ".join(f"{t:>10}" for t in tasks))
    for rep in reports:
        for s in rep.stages:
            cells = []
            have = s.tasks()
            for t in tasks:
                if t == ALL_TASKS or t in have:
                    acc, _ = s.weighted(t)
                    cells.append(f"{100 * acc:>9.1f}%")
                else:
                    cells.append(f"{'-':>10}")
            lines.append(f"{rep.regime + '/' + s.stage:<{label_w}}  " + "  ".join(cells))
    return "\n".join(lines)
