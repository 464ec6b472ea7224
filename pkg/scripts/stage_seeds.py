"""Layered transfer over several seeds: per-stage pooled accuracy, mean and spread.

    python scripts/stage_seeds.py [--config PATH] [--seeds 7 8 9] [--baselines]

With ``--baselines`` the federated multi-task and individual baselines are run
for each seed as well, giving the gaps the qualitative ordering is about.
"""

from __future__ import annotations

import argparse
import dataclasses

import numpy as np

from fedmtl import bundled_config, pipeline
from fedmtl.config import build_experiment, load_config
from fedmtl.metrics import weighted_average_accuracy


def pooled(stages) -> float:
    return 100 * weighted_average_accuracy([(r.accuracy, r.n) for st in stages
                                            for per in st.clients.values() for r in per.values()])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(bundled_config("synthetic_4client.json")))
    ap.add_argument("--seeds", type=int, nargs="+", default=[7, 8, 9])
    ap.add_argument("--baselines", action="store_true")
    args = ap.parse_args(argv)

    base = build_experiment(load_config(args.config))
    table: dict[str, list[float]] = {}
    for seed in args.seeds:
        spec = dataclasses.replace(base, seed=seed)
        _, rep = pipeline.run_layered(spec)
        for st in rep.stages:
            table.setdefault(st.stage, []).append(pooled([st]))
        if args.baselines:
            table.setdefault("federated_multi_task", []).append(
                pooled([pipeline.run_federated_multi_task(spec)[0].final]))
            table.setdefault("individual", []).append(
                pooled([pipeline.run_individual(spec, t)[0].final for t in spec.model.tasks]))
        print(f"seed {seed}: " + ", ".join(f"{k} {v[-1]:.1f}" for k, v in table.items()))

    print(f"\n{'stage':<28}{'mean':>8}{'std':>8}{'min':>8}")
    for name, vals in table.items():
        v = np.array(vals)
        print(f"{name:<28}{v.mean():>8.1f}{v.std():>8.1f}{v.min():>8.1f}")


if __name__ == "__main__":
    main()
