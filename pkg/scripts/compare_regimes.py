"""Run every regime on one config and print a regime x task accuracy table.

    python scripts/compare_regimes.py [--config PATH] [--out DIR] [--seed N]

Per-task one-task regimes are folded into a single row per regime; the
``all`` column pools every (client, task) pair weighted by test size.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import time
from pathlib import Path

from fedmtl import bundled_config, pipeline
from fedmtl.config import build_experiment, load_config
from fedmtl.metrics import weighted_average_accuracy


def _pool(stages, task=None):
    entries = [(r.accuracy, r.n) for st in stages for per in st.clients.values()
               for t, r in per.items() if task is None or t == task]
    return (100 * weighted_average_accuracy(entries), sum(n for _, n in entries)) if entries else (None, 0)


def collect(spec) -> dict[str, list]:
    """Final-stage results per regime name."""
    rows: dict[str, list] = {}
    for task in spec.task_list:
        rows.setdefault("individual", []).append(pipeline.run_individual(spec, task)[0].final)
        rows.setdefault("centralized_bulk", []).append(pipeline.run_centralized_bulk(spec, task)[0].final)
        rows.setdefault("federated_one_task", []).append(pipeline.run_federated_one_task(spec, task)[0].final)
    rows["federated_multi_task"] = [pipeline.run_federated_multi_task(spec)[0].final]
    _, rep = pipeline.run_layered(spec)
    for st in rep.stages:
        rows[f"layered/{st.stage}"] = [st]
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(bundled_config("all_regimes.json")))
    ap.add_argument("--out", default="runs/compare_regimes")
    ap.add_argument("--seed", type=int, help="override the config seed")
    args = ap.parse_args(argv)

    spec = build_experiment(load_config(args.config))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    t0 = time.perf_counter()
    rows = collect(spec)
    tasks = spec.model.tasks

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "regimes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regime"] + tasks + ["all", "n_all"])
        print(f"{'regime':<40}" + "".join(f"{t:>10}" for t in tasks) + f"{'all':>10}")
        for name, stages in rows.items():
            cells = [_pool(stages, t)[0] for t in tasks]
            acc, n = _pool(stages)
            w.writerow([name] + ["" if c is None else f"{c:.2f}" for c in cells] + [f"{acc:.2f}", n])
            shown = "".join(f"{'-':>10}" if c is None else f"{c:>9.1f}%" for c in cells)
            print(f"{name:<40}{shown}{acc:>9.1f}%")
    print(f"\n{time.perf_counter() - t0:.0f}s, table written to {out / 'regimes.csv'}")


if __name__ == "__main__":
    main()
