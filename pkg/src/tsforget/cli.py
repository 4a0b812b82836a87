"""Command-line entry point: ``tsforget {gen-data,protocol,ablate,report,pretrain}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, synthgen
from .continual import ConfigError, ExperimentConfig, prepare_dataset, pretrain_generalist, run_protocol
from .forecaster import load_checkpoint
from .optim import TrainingDivergedError
from .pipeline import CSVFormatError, read_csv, write_csv
from .report import (AblationGrid, dataset_from_dir, emit_forecast_plot, load_reports,
                     render_markdown, rows_from_report, run_grid, write_tables)

log = logging.getLogger("tsforget")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_json(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path} must hold a JSON object")
    return raw


def _load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        return ExperimentConfig.from_dict(_load_json(path))
    except ConfigError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_manifest(out: Path, command: str, config_path, resolved: dict, extra=None) -> None:
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "resolved_config": resolved,
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    names = [n.strip().lower() for n in args.datasets.split(",") if n.strip()]
    for n in names:
        if n not in synthgen.BUILTIN_PERIODS:
            raise UsageError(f"unknown dataset {n!r}")
    out = _prepare_out(args.out)
    specs = {}
    for n in names:
        spec = synthgen.builtin_spec(n, args.seed)
        write_csv(synthgen.generate_series(spec), out / f"{n}.csv")
        specs[n] = spec.to_dict()
        log.info("wrote %s", out / f"{n}.csv")
    _write_manifest(out, "gen-data", None, {"seed": args.seed, "datasets": names},
                    {"signal_specs": specs})
    return EXIT_OK


def cmd_protocol(args) -> int:
    path_a, path_b = Path(args.a), Path(args.b)
    if path_a.resolve() == path_b.resolve():
        raise UsageError("datasets must differ")
    name_a, name_b = path_a.stem, path_b.stem
    if name_a == name_b:
        raise UsageError(f"datasets must have distinct file names, both are {name_a!r}")
    cfg = _load_config(args.config)
    try:
        series_a, series_b = read_csv(path_a), read_csv(path_b)
        ds_a = prepare_dataset(series_a, name_a, cfg.window)
        ds_b = prepare_dataset(series_b, name_b, cfg.window)
    except (OSError, CSVFormatError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_out(args.out)
    (out / "data").mkdir(exist_ok=True)
    write_csv(series_a, out / "data" / f"{name_a}.csv")
    write_csv(series_b, out / "data" / f"{name_b}.csv")
    _write_manifest(out, "protocol", args.config, cfg.to_dict(),
                    {"inputs": [str(path_a), str(path_b)]})

    report = run_protocol(ds_a, ds_b, cfg, initial_checkpoint=args.initial_checkpoint,
                          out_dir=out).to_dict()
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    rows = rows_from_report(report)
    write_tables(rows, out)
    sys.stdout.write(render_markdown(rows))
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        grid = AblationGrid.from_dict(_load_json(args.grid))
    except (ValueError, TypeError, ConfigError) as exc:
        raise UsageError(f"invalid grid {args.grid}: {exc}") from exc
    out = _prepare_out(args.out)
    datasets = {}
    if args.data_dir:
        for a, b in grid.pairs:
            for n in (a, b):
                p = Path(args.data_dir) / f"{n}.csv"
                if p.is_file():
                    datasets[n] = read_csv(p)
    for a, b in grid.pairs:
        for n in (a, b):
            if n not in datasets and n.lower() not in synthgen.BUILTIN_PERIODS:
                raise UsageError(f"dataset {n!r} is neither built in nor found in --data-dir")
    _write_manifest(out, "ablate", args.grid, {
        "learning_rates": list(grid.learning_rates),
        "epoch_counts": list(grid.epoch_counts),
        "pairs": [list(p) for p in grid.pairs],
        "base_seed": grid.base_seed,
        "data_seed": args.data_seed,
        "base_config": grid.base_config.to_dict(),
    })
    rows = run_grid(grid, out, datasets, data_seed=args.data_seed, workers=args.workers)
    sys.stdout.write(render_markdown(rows))
    failures = json.loads((out / "failures.json").read_text())
    if failures:
        for f in failures:
            print(f"cell {f['cell_id']} failed: {f['error']}", file=sys.stderr)
        print(f"{len(failures)} of {len(grid.cells())} cells failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _parse_plot(spec: str) -> tuple[str, int]:
    name, sep, idx = spec.rpartition(":")
    if not sep or not name:
        raise UsageError(f"--plot expects DATASET:WINDOW, got {spec!r}")
    try:
        return name, int(idx)
    except ValueError as exc:
        raise UsageError(f"--plot window must be an integer, got {idx!r}") from exc


def cmd_report(args) -> int:
    in_dir = Path(args.in_dir)
    reports = load_reports(in_dir) if in_dir.is_dir() else []
    if not reports:
        raise UsageError(f"no report.json files found under {in_dir}")
    rows = [row for rep in reports for row in rows_from_report(rep)]
    write_tables(rows, in_dir)
    sys.stdout.write(render_markdown(rows))

    for spec in args.plot or []:
        name, window = _parse_plot(spec)
        candidates = [r for r in reports if name in r["pair"]]
        if args.cell:
            candidates = [r for r in candidates if r.get("cell_id") == args.cell]
        if not candidates:
            raise UsageError(f"no run involving dataset {name!r}")
        rep = candidates[0]
        cfg = ExperimentConfig.from_dict(rep["config"])
        ds = dataset_from_dir(in_dir, name, cfg.window)
        for stage, suffix in (("stage2", ""), ("stage1", "_stage1")):
            params, _ = load_checkpoint(Path(rep["_dir"]) / rep[stage]["checkpoint"])
            base = in_dir / "plots" / f"{name}_w{window}{suffix}"
            try:
                emit_forecast_plot(ds, params, window, base, cfg.window,
                                   title=f"{name.upper()} test window {window} after {stage}")
            except IndexError as exc:
                raise UsageError(str(exc)) from exc
            log.info("wrote %s.{csv,svg}", base)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    _prepare_out(out.parent if str(out.parent) else ".")
    pretrain_generalist(args.pool_size, cfg, seed=args.seed, out_path=out)
    log.info("wrote %s", out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsforget", description="Benchmark catastrophic forgetting in time-series forecasters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the built-in datasets as CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--datasets", default="d1,d2,d3,d4")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("protocol", help="run the two-stage fine-tuning protocol on two CSVs")
    p.add_argument("--a", required=True, help="stage-one dataset CSV")
    p.add_argument("--b", required=True, help="stage-two dataset CSV")
    p.add_argument("--config", help="JSON experiment config; missing keys take defaults")
    p.add_argument("--out", required=True)
    p.add_argument("--initial-checkpoint", help="start stage one from this checkpoint")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("ablate", help="run a learning-rate / epoch grid")
    p.add_argument("--grid", required=True, help="JSON grid file")
    p.add_argument("--out", required=True)
    p.add_argument("--data-dir", help="directory with <dataset>.csv files to use instead of generating")
    p.add_argument("--data-seed", type=int, default=0, help="phase seed for built-in datasets")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="re-render tables and plots from a results directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--plot", action="append", metavar="DATASET:WINDOW")
    p.add_argument("--cell", help="cell id to plot from (default: first run using the dataset)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pretrain", help="train a generalist starting checkpoint")
    p.add_argument("--pool-size", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
