"""``fedmtl gen-data|run|eval --config PATH [--out DIR] [--workers N]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import re
import shutil
import sys
from pathlib import Path

from fedmtl import pipeline
from fedmtl.config import ConfigError, build_experiment, load_clients, load_config, model_config, resolve_vocab
from fedmtl.data import synthetic_records, write_csv
from fedmtl.federation import GlobalState, load_checkpoint, save_checkpoint
from fedmtl.metrics import MetricsReport, emit_report, format_table

log = logging.getLogger("fedmtl")


class UsageError(Exception):
    pass


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.+-]+", "-", name).strip("-")


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if "synthetic" not in cfg.raw["data"]:
        raise UsageError("gen-data needs a data.synthetic section in the config")
    out = Path(args.out) if args.out else cfg.output_dir() / "data"
    out.mkdir(parents=True, exist_ok=True)
    records = synthetic_records(cfg.synthetic, cfg.data.window_length, cfg.data_seed)
    for cid, recs in records.items():
        write_csv(out / f"{cid}.csv", recs)
        print(f"wrote {out / f'{cid}.csv'} ({len(recs)} records)")
    return 0


def _run_regime(regime: str, spec: pipeline.ExperimentSpec, ckpt_dir: Path) -> list[MetricsReport]:
    rdir = ckpt_dir / regime
    rdir.mkdir(parents=True, exist_ok=True)
    reports = []
    if regime == "layered_transfer":
        counter = iter(range(100))

        def on_stage(name, state):
            save_checkpoint(state, rdir / f"stage{next(counter)}_{_safe(name)}.ckpt")

        state, rep = pipeline.run_layered(spec, on_stage)
        save_checkpoint(state, rdir / "final.ckpt")
        reports.append(rep)
    elif regime == "federated_multi_task":
        rep, state = pipeline.run_federated_multi_task(spec)
        save_checkpoint(state, rdir / "final.ckpt")
        reports.append(rep)
    else:
        for task in spec.task_list:
            if task not in spec.model.heads:
                raise ValueError(f"task {task!r} has no head (fewer than two classes in the data)")
            if regime == "individual":
                rep, models = pipeline.run_individual(spec, task)
                for cid, params in models.items():
                    save_checkpoint(GlobalState.from_params(spec.model, params, [cid]),
                                    rdir / f"{task}__{_safe(cid)}.ckpt")
            elif regime == "centralized_bulk":
                rep, params = pipeline.run_centralized_bulk(spec, task)
                save_checkpoint(GlobalState.from_params(spec.model, params, spec.cohort(task)),
                                rdir / f"{task}.ckpt")
            else:
                rep, state = pipeline.run_federated_one_task(spec, task)
                save_checkpoint(state, rdir / f"{task}.ckpt")
            reports.append(rep)
    return reports


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = cfg.output_dir(args.out)
    spec = build_experiment(cfg, workers=args.workers)
    ckpt_dir = out / "checkpoints"
    if ckpt_dir.exists():
        shutil.rmtree(ckpt_dir)
    reports = []
    for regime in cfg.regimes:
        log.info("running %s", regime)
        reports.extend(_run_regime(regime, spec, ckpt_dir))
    for rep in reports:
        rep.metadata.update({"config_digest": cfg.digest(), "data_seed": cfg.data_seed})
    emit_report(reports, out)
    print(format_table(reports))
    print(f"\nreport written to {out}")
    return 0


def _csv_paths(data: str) -> dict[str, Path]:
    p = Path(data)
    files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
    if not files:
        raise UsageError(f"no CSV files under {data}")
    return {f.stem: f for f in files}


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    vocab = resolve_vocab(cfg)
    mc = model_config(cfg, vocab)
    state = load_checkpoint(args.checkpoint, mc)
    clients = load_clients(cfg, vocab, _csv_paths(args.data) if args.data else None)
    stage = pipeline.evaluate_state(state, clients, mc.tasks, "eval")
    rep = MetricsReport("eval", [stage], {"seed": cfg.seed, "config_digest": cfg.digest(),
                                           "model_digest": mc.digest(), "checkpoint": str(args.checkpoint)})
    out = Path(args.out) if args.out else cfg.output_dir() / "eval"
    emit_report([rep], out)
    print(format_table([rep]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedmtl", description="Federated multi-task transfer learning simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", help="write synthetic per-client CSV files")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)
    r = sub.add_parser("run", help="run the configured regime(s)")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_run)
    e = sub.add_parser("eval", help="evaluate a checkpoint without training")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--data", help="CSV file or directory of CSVs (one client per file)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("fedmtl: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"fedmtl: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        if args.verbose:
            log.exception("run failed")
        print(f"fedmtl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
