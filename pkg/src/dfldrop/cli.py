"""Command line entry point.

    dfldrop validate CONFIG
    dfldrop run CONFIG [--seed N] [--out DIR] [--folds K] [--jobs J] [--strategy S ...] [--dry-run]
    dfldrop dump-recon SNAPSHOT --attack {model-inversion,gradient-inversion} --out DIR

Output tree of ``run``::

    OUT/final_table.csv
    OUT/<dataset>-<algo>-<partition>/convergence.svg
    OUT/<dataset>-<algo>-<partition>/similarity.svg
    OUT/<dataset>-<algo>-<partition>/<strategy>/metrics.csv
    OUT/<dataset>-<algo>-<partition>/<strategy>/fold<k>/rounds.csv
    OUT/<dataset>-<algo>-<partition>/<strategy>/fold<k>/snapshots.json      (dropout runs)
    OUT/<dataset>-<algo>-<partition>/<strategy>/fold<k>/reconstruction/     (adaptive runs)

Exit status: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import recon, report
from .config import ExperimentConfig, parse_config
from .datahub import kfold_plan, load_csv, minmax_normalize
from .diffmath import ParamVec
from .engine import STRATEGIES, ExperimentResult, run_fold
from .exceptions import ConfigError, DFLError, ReconstructionUnavailable
from .models import Model, ModelSpec
from .seeding import SeedPlan

log = logging.getLogger("dfldrop")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dfldrop", description="Simulate client dropout in decentralized federated learning.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a config file and exit")
    v.add_argument("config")

    r = sub.add_parser("run", help="run the experiment matrix of a config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, help="override the master seed")
    r.add_argument("--out", help="output directory (default: config value or ./results)")
    r.add_argument("--folds", type=int, help="number of cross-validation folds")
    r.add_argument("--jobs", type=int, default=1, help="worker processes")
    r.add_argument("--strategy", action="append", choices=STRATEGIES,
                   help="only run this strategy (repeatable)")
    r.add_argument("--dry-run", action="store_true", help="print the cell plan without running")

    d = sub.add_parser("dump-recon", help="rerun an attack on a saved snapshot pair")
    d.add_argument("snapshot", help="snapshots.json written by `run`")
    d.add_argument("--attack", choices=("model-inversion", "gradient-inversion"), default="model-inversion")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--config", help="take [recon] settings from this config")
    return ap


# --------------------------------------------------------------------------
# tasks


def cell_name(cfg: ExperimentConfig, algo: str, partition: str) -> str:
    return f"{cfg.dataset_name}-{algo}-{partition}"


def load_dataset(cfg: ExperimentConfig):
    ds = load_csv(cfg.dataset_path, header=cfg.header, grid_shape=cfg.grid_shape, name=cfg.dataset_name)
    return minmax_normalize(ds) if cfg.normalize else ds


def _run_task(args):
    cfg, algo, partition, strategy, fold = args
    ds = load_dataset(cfg)
    plan = kfold_plan(ds, cfg.folds, SeedPlan(cfg.seed).rng("split"))
    fed = cfg.federation_config(algo, partition, strategy)
    return run_fold(fed, ds, plan, fold, cfg.seed)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_fold(result: ExperimentResult, fold_dir: Path, grid_shape, lr: float, dump_recon: bool = True) -> None:
    fold_dir.mkdir(parents=True, exist_ok=True)
    with open(fold_dir / "rounds.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "mean_accuracy", "similarity", "tracked", "pairs", "skipped", "events"])
        for r in result.logs:
            w.writerow([r.round, _fmt(r.mean_accuracy), _fmt(r.similarity), r.active,
                        " ".join(f"{i}-{j}" for i, j in r.pairs),
                        " ".join(f"{i}-{j}" for i, j in r.skipped_pairs), " ".join(r.events)])
    if result.dead is not None:
        save_snapshots(fold_dir / "snapshots.json", result, lr)
    if dump_recon and result.synthetic is not None:
        report.dump_reconstruction(result.synthetic, fold_dir / "reconstruction", grid_shape)


def save_snapshots(path: Path, result: ExperimentResult, lr: float) -> None:
    """Both broadcasts of the dead client seen last, oldest first, plus the nominal lr."""
    spec = result.spec
    doc = {
        "dead_client": result.dead,
        "lr": lr,
        "model": {"kind": spec.kind, "n_features": spec.n_features, "n_classes": spec.n_classes,
                  "hidden": list(spec.hidden)},
        "snapshots": [[float(v) for v in p.data] for p in result.dead_snapshots],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_snapshots(path) -> tuple[ModelSpec, list[ParamVec], float]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        m = doc["model"]
        spec = ModelSpec(m["kind"], m["n_features"], m["n_classes"], tuple(m["hidden"]))
        snaps = [ParamVec(np.array(s, dtype=np.float64), spec.shapes) for s in doc["snapshots"]]
        return spec, snaps, float(doc["lr"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: malformed snapshot file ({exc})") from None


def run_matrix(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    tasks = [(cfg, a, p, s, k) for a, p, s in cfg.cells() for k in range(cfg.folds)]
    results: dict[tuple, ExperimentResult | BaseException] = {}
    if jobs <= 1:
        for t in tasks:
            results[t[1:]] = _guarded(t)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for t, res in zip(tasks, pool.map(_guarded, tasks)):
                results[t[1:]] = res
    failed = 0
    rows = []
    for a, p in dict.fromkeys((a, p) for a, p, _ in cfg.cells()):
        cell_dir = out / cell_name(cfg, a, p)
        series = []
        for s in cfg.strategies:
            folds = [results[(a, p, s, k)] for k in range(cfg.folds)]
            errors = [(k, e) for k, e in enumerate(folds) if isinstance(e, BaseException)]
            if errors:
                failed += 1
                for k, e in errors:
                    print(f"cell {cell_name(cfg, a, p)}/{s} fold {k} failed: {e}", file=sys.stderr)
                continue
            for k, res in enumerate(folds):
                write_fold(res, cell_dir / s / f"fold{k}", cfg.grid_shape, cfg.algorithms[a].lr, cfg.dump_recon)
            rounds = cfg.federation_config(a, p, s).rounds
            agg = report.aggregate(folds, strategy=s, horizon=rounds)
            report.write_metrics_csv(agg, cell_dir / s / "metrics.csv")
            rows.append(report.final_row(cfg.dataset_name, a, p, agg))
            series.append(agg)
        if series and cfg.svg:
            title = cell_name(cfg, a, p)
            report.emit_svg(series, "convergence", cell_dir / "convergence.svg", title)
            report.emit_svg(series, "similarity", cell_dir / "similarity.svg", title)
    report.write_final_table_csv(rows, out / "final_table.csv")
    return EXIT_RUNTIME if failed else EXIT_OK


def _guarded(task):
    try:
        return _run_task(task)
    except Exception as exc:  # reported per cell by the caller
        log.debug("task %s failed:\n%s", task[1:], traceback.format_exc())
        return TaskFailure(f"{type(exc).__name__}: {exc}")


class TaskFailure(Exception):
    """Picklable stand-in for an exception raised inside a worker."""


# --------------------------------------------------------------------------
# commands


def cmd_validate(ns) -> int:
    cfg = parse_config(ns.config)
    n = len(cfg.cells())
    print(f"{ns.config}: ok ({n} cells x {cfg.folds} folds)")
    return EXIT_OK


def cmd_run(ns) -> int:
    cfg = parse_config(ns.config)
    if ns.seed is not None:
        cfg = replace(cfg, seed=ns.seed)
    if ns.folds is not None:
        if ns.folds < 2:
            raise ConfigError("--folds must be >= 2")
        cfg = replace(cfg, folds=ns.folds)
    if ns.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if ns.strategy:
        missing = [s for s in ns.strategy if s not in cfg.strategies]
        if missing:
            raise ConfigError(f"--strategy {missing[0]} is not enabled in {ns.config}")
        cfg = replace(cfg, strategies=tuple(dict.fromkeys(ns.strategy)))
    out = Path(ns.out) if ns.out else (cfg.out or Path("results"))
    if ns.dry_run:
        for a, p, s in cfg.cells():
            print(f"{cell_name(cfg, a, p)}/{s}: {cfg.folds} folds")
        print(f"{len(cfg.cells()) * cfg.folds} runs -> {out}")
        return EXIT_OK
    return run_matrix(cfg, out, ns.jobs)


def cmd_dump_recon(ns) -> int:
    rcfg, grid = recon.ReconConfig(), None
    if ns.config:
        cfg = parse_config(ns.config)
        rcfg, grid = cfg.recon, cfg.grid_shape
    spec, snaps, lr = load_snapshots(ns.snapshot)
    if not snaps:
        raise ReconstructionUnavailable("snapshot file holds no snapshots")
    model = Model(spec, snaps[-1])
    if ns.attack == "model-inversion":
        syn = recon.model_inversion(model, rcfg, ns.seed, grid)
    else:
        if len(snaps) < 2:
            raise ReconstructionUnavailable("gradient inversion needs two snapshots")
        syn = recon.gradient_inversion(model, recon.pseudo_gradient(snaps[0], snaps[1], lr), rcfg, ns.seed, grid)
    paths = report.dump_reconstruction(syn, ns.out, grid)
    print(f"wrote {len(paths)} files to {ns.out}")
    return EXIT_OK


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"validate": cmd_validate, "run": cmd_run, "dump-recon": cmd_dump_recon}[ns.command]
    try:
        return handler(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DFLError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
