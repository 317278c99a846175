"""Command-line workflow runner.

Subcommands: ``collect``, ``train``, ``certify``, ``evaluate``, ``report``.
Each takes ``--config FILE`` (merged over per-plant defaults) and repeated
``--set section.key=value`` overrides.  The output directory comes from the
config, overridable with the ``KNODEMPC_OUTDIR`` environment variable.

Exit codes: 0 success, 1 usage/config error, 2 solver or training failure,
3 certification failure (negative descent margin).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments, metrics
from .config import ConfigError, RunConfig, load_config, save_config
from .ensemble import load_manifest, load_members, save_manifest
from .knode import TrainingDivergedError, TrajectoryDataset
from .net import save_checkpoint
from .ode import SimulationAborted

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SOLVER = 2
EXIT_CERTIFICATION = 3


class CertificationFailure(RuntimeError):
    pass


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(os.environ.get("KNODEMPC_OUTDIR", cfg.out_dir))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    return load_config(args.config, plant=args.plant, overrides=args.set or [])


def cmd_collect(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    try:
        dataset = experiments.collect_dataset(cfg)
    except SimulationAborted as exc:
        # leave no partial file behind
        target = out / "dataset.csv"
        if target.exists():
            target.unlink()
        print(f"collect: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    path = out / "dataset.csv"
    dataset.save(path)
    save_config(cfg, out / "config.yaml")
    print(f"collect: wrote {dataset.n_samples} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    dataset_path = Path(args.dataset) if args.dataset else out / "dataset.csv"
    if not dataset_path.exists():
        print(f"train: dataset {dataset_path} not found", file=sys.stderr)
        return EXIT_USAGE
    dataset = TrajectoryDataset.load(dataset_path)
    try:
        result = experiments.train_members(cfg, dataset)
    except (TrainingDivergedError, RuntimeError) as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    member_dir = out / "members"
    member_dir.mkdir(exist_ok=True)
    member_paths = []
    for j, (member, seed) in enumerate(zip(result.members, result.member_seeds)):
        rel = f"members/member_{j}.txt"
        save_checkpoint(out / rel, member, seed)
        member_paths.append(rel)

    training_info = {
        "epochs": cfg.training.epochs,
        "learning_rate": cfg.training.learning_rate,
        "weight_decay": cfg.training.weight_decay,
        "hidden_sizes": result.hidden_sizes,
        "member_seeds": result.member_seeds,
        "weight_epochs": cfg.weights.epochs,
        "weight_learning_rate": cfg.weights.learning_rate,
        "weight_decay_weights": cfg.weights.weight_decay,
        "nonnegative_weights": cfg.weights.nonnegative,
    }
    extra = {
        "holdout_losses": result.holdout_losses,
        "diverged_members": result.failures,
        "provenance": cfg.provenance(),
    }
    for name, weights in (("ensemble_optimized.json", result.weights_optimized),
                          ("ensemble_equal.json", result.weights_equal)):
        save_manifest(out / name, member_paths, weights, experiments.nominal_id(cfg),
                      result.split, training_info, extra)
    if result.failures:
        print(f"train: {len(result.failures)} member(s) diverged and were dropped: "
              f"{result.failures}")
    print(f"train: {len(result.members)} members -> {out / 'ensemble_optimized.json'}")
    print("train: hold-out losses " + json.dumps(result.holdout_losses))
    return EXIT_OK


def _load_ensemble(out: Path, variant: str):
    manifest = load_manifest(out / f"ensemble_{variant}.json")
    members = load_members(manifest, out)
    return members, np.asarray(manifest["weights"], float)


def cmd_certify(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    members = weights = None
    model = args.model or cfg.certify.model
    if model == "ensemble":
        members, weights = _load_ensemble(out, "optimized")
    ing, report = experiments.run_certification(cfg, model, members, weights)
    doc = {
        "format": "knodempc-certificate v1",
        "model": model,
        "A": ing.A.tolist(),
        "B": ing.B.tolist(),
        "K": ing.K.tolist(),
        "P": ing.P.tolist(),
        "rho": ing.rho,
        "gamma_certified": report.gamma,
        "epsilon": report.epsilon,
        "delta": report.delta,
        "delta1": report.delta1,
        "S_delta": report.S_delta,
        "e_delta_bound": report.e_delta_bound,
        "descent_margin": report.descent_margin,
        "samples_checked": report.samples_checked,
        "sample_seed": report.seed,
        "gamma_target": cfg.mpc.gamma,
        "gamma_target_within_certified": bool(report.passed and cfg.mpc.gamma <= report.gamma),
        "passed": report.passed,
        "provenance": cfg.provenance(),
    }
    path = out / "certificate.json"
    path.write_text(json.dumps(metrics._jsonable(doc), indent=2, sort_keys=True) + "\n")
    print(f"certify: model={model} epsilon={report.epsilon:.6g} "
          f"gamma_certified={report.gamma:.6g} margin={report.descent_margin:.6g} -> {path}")
    print(f"certify: target gamma {cfg.mpc.gamma} within certified range: "
          f"{doc['gamma_target_within_certified']}")
    if not report.passed:
        print("certify: FAILED (negative descent margin)", file=sys.stderr)
        return EXIT_CERTIFICATION
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    try:
        members, w_opt = _load_ensemble(out, "optimized")
        _, w_eq = _load_ensemble(out, "equal")
    except FileNotFoundError as exc:
        print(f"evaluate: missing checkpoint ({exc})", file=sys.stderr)
        return EXIT_USAGE
    record, series = experiments.evaluate(cfg, members, w_opt, w_eq)
    series_files = {}
    for scheme, (t, runs) in series.items():
        if not runs:
            continue
        rel = f"series_{scheme}.csv"
        metrics.write_series(out / rel, t, runs, cfg.provenance())
        series_files[scheme] = rel
    record["series_files"] = series_files
    metrics.save_metrics(out / "metrics.json", record, cfg.provenance())
    print(f"evaluate: wrote {out / 'metrics.json'} "
          f"({cfg.evaluate.n_runs} prediction runs, "
          f"{cfg.evaluate.n_closedloop_runs} closed-loop runs)")
    if record["failures"]:
        print(f"evaluate: excluded failures {record['failures']}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out_dir) if args.out_dir else None
    records = []
    for path in args.metrics:
        records.append((Path(path), metrics.load_metrics(path)))
    if out is None:
        out = (records[0][0].parent / "report") if records else Path("report")
    out.mkdir(parents=True, exist_ok=True)

    stat_cols = ["count", "median", "q1", "q3", "min", "max"]
    rows = []
    run_rows = []
    for path, rec in records:
        plant = rec.get("plant", "?")
        for block_name, block in sorted(rec.items()):
            if not (isinstance(block, dict) and "per_run" in block):
                continue
            for scheme, agg in sorted(block["aggregates"].items()):
                rows.append([plant, block_name, scheme] + [agg[c] for c in stat_cols])
            for scheme, vals in sorted(block["per_run"].items()):
                for i, v in enumerate(vals):
                    run_rows.append([plant, block_name, scheme, i, v])
    metrics.write_table(out / "stats.csv", ["plant", "metric", "scheme"] + stat_cols, rows)
    metrics.write_table(out / "per_run.csv", ["plant", "metric", "scheme", "run", "value"], run_rows)

    # error-band tables: median/min/max over runs, three series per scheme
    for path, rec in records:
        for scheme, rel in sorted(rec.get("series_files", {}).items()):
            t, runs = metrics.read_series(path.parent / rel)
            if not runs:
                continue
            mat = np.stack([runs[k] for k in sorted(runs)])
            band_rows = [
                [t[i], float(np.median(mat[:, i])), float(np.min(mat[:, i])), float(np.max(mat[:, i]))]
                for i in range(mat.shape[1])
            ]
            metrics.write_table(out / f"bands_{scheme}.csv",
                                ["t", "median", "min", "max"], band_rows)
    print(f"report: wrote tables to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knodempc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--plant", default=None, choices=["pendulum", "quadrotor"])
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")

    p = sub.add_parser("collect", help="record a dataset under nominal-model MPC")
    common(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the ensemble and optimize its weights")
    common(p)
    p.add_argument("--dataset", default=None, help="dataset file (default: <out>/dataset.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="compute and check the terminal ingredients")
    common(p)
    p.add_argument("--model", default=None, choices=["true", "nominal", "ensemble"])
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("evaluate", help="prediction and closed-loop test runs")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge metrics into plain-text tables")
    p.add_argument("metrics", nargs="*", help="metrics.json files")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulationAborted, TrainingDivergedError, FloatingPointError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
