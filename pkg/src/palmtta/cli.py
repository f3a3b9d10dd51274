"""Command line entry point: ``palm {train-source,run,sweep,report}``.

Exit codes: 0 success, 1 configuration error, 2 a run diverged.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import runner as rn

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _load_config(args) -> rn.RunConfig:
    cfg = rn.RunConfig.load(args.config) if args.config else rn.RunConfig()
    updates = rn.parse_set(args.set)
    if getattr(args, "aggregate_layer_mean", False):
        updates["palm.aggregate_layer_mean"] = True
    return cfg.with_updates(updates) if updates else cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override one config key (repeatable), e.g. --set palm.alpha=0.9")
    p.add_argument("--aggregate-layer-mean", action="store_true",
                   help="scale each layer by its mean importance instead of elementwise")


def cmd_train_source(args) -> int:
    cfg = _load_config(args)
    dataset = rn.make_dataset(cfg.dataset)
    net = rn.train_source_model(cfg, dataset)
    err = float(np.mean(net.predict(dataset.x_test) != dataset.y_test))
    print(f"source snapshot: {rn.snapshot_path(cfg)}")
    print(f"clean test error: {err:.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    ws = rn.Workspace(train_missing=args.train_source)
    out = Path(rn.output_dir(cfg))
    reports = []
    for seed in cfg.seeds:
        rep = rn.run(cfg, seed, ws)
        reports.append(rep)
        flag = "  DIVERGED" if rep.diverged else ""
        print(f"{rep.run_id}: overall error {rep.overall_error:.4f}{flag}")
        if args.dump_scenario:
            out.mkdir(parents=True, exist_ok=True)
            ws.stream(cfg, seed).dump_jsonl(out / f"scenario-{cfg.scenario.protocol}-s{seed}.jsonl")
    rn.report(reports, out, prefix=f"{rn.method_label(cfg.method)}-")
    cfg.save(out / f"{cfg.run_prefix()}.cfg")
    return EXIT_DIVERGED if any(r.diverged for r in reports) else EXIT_OK


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise rn.ConfigError(f"--grid expects key=[v1,v2,...], got {item!r}")
        key, text = item.split("=", 1)
        values = rn.parse_value(text.strip())
        grid[key.strip()] = values if isinstance(values, list) else [values]
    return grid


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = {}
    if args.grid_file:
        grid.update(json.loads(Path(args.grid_file).read_text()))
    grid.update(_parse_grid(args.grid))
    if args.eta_grid:
        grid["palm.eta"] = list(rn.ETA_GRID)
    if not grid:
        raise rn.ConfigError("sweep needs at least one --grid entry")
    ws = rn.Workspace(train_missing=args.train_source)
    reports = rn.sweep(cfg, grid, ws)
    paths = rn.report(reports, rn.output_dir(cfg), prefix="sweep-")
    for r in reports:
        print(f"{r.run_id}: {r.params} overall error {r.overall_error:.4f}{'  DIVERGED' if r.diverged else ''}")
    print(f"summary: {paths['summary']}")
    return EXIT_DIVERGED if any(r.diverged for r in reports) else EXIT_OK


def cmd_report(args) -> int:
    files = []
    for p in map(Path, args.paths):
        files += sorted(p.glob("*.csv")) if p.is_dir() else [p]
    reports = [rn.load_run_csv(f) for f in files]
    paths = rn.report(reports, args.out, prefix="report-")
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="palm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-source", help="train and cache the source model")
    _add_common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("run", help="adapt over one stream per configured seed")
    _add_common(p)
    p.add_argument("--train-source", action="store_true", help="train the source model if no snapshot exists")
    p.add_argument("--dump-scenario", action="store_true", help="also write the stream as JSON lines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="Cartesian grid of config values x seeds")
    _add_common(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=[V1,V2]",
                   help="grid axis, JSON list of values; the key 'seeds' sets the seed list")
    p.add_argument("--grid-file", help="JSON object of grid axes")
    p.add_argument("--eta-grid", action="store_true", help="sweep palm.eta over the 12-point threshold grid")
    p.add_argument("--train-source", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summaries and plot data from per-batch run CSVs")
    p.add_argument("paths", nargs="+", help="run CSV files or directories of them")
    p.add_argument("--out", default="palm_report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (rn.ConfigError, rn.SnapshotMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
