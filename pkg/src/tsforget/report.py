"""Ablation grids over learning rate and epochs, result tables, forecast plots.

Output tree of ``run_grid``::

    out_dir/
      data/<dataset>.csv
      cells/<cell-id>/{stage1.ckpt, stage2.ckpt, report.json}
      results.csv, results.md, failures.json
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import synthgen
from .continual import (ExperimentConfig, PreparedDataset, _predictor, prepare_dataset,
                        run_protocol)
from .pipeline import TimeSeries, WindowConfig, read_csv, write_csv

log = logging.getLogger(__name__)

CSV_COLUMNS = ["lr", "epochs", "experiment", "dataset", "stage_one", "stage_two", "bwt"]
MD_COLUMNS = ["LR", "Epochs", "Experiment", "Dataset", "Stage one", "Stage two", "BWT"]
ARROW = " → "

_SEED_MASK = 2**63 - 1


@dataclass(frozen=True)
class AblationGrid:
    learning_rates: tuple[float, ...]
    epoch_counts: tuple[int, ...]
    pairs: tuple[tuple[str, str], ...]
    base_config: ExperimentConfig = dataclasses.field(default_factory=ExperimentConfig)
    base_seed: int = 0

    def __post_init__(self):
        lrs = tuple(dict.fromkeys(float(x) for x in self.learning_rates))
        eps = tuple(dict.fromkeys(int(x) for x in self.epoch_counts))
        pairs = tuple(dict.fromkeys((str(a), str(b)) for a, b in self.pairs))
        if not (lrs and eps and pairs):
            raise ValueError("learning_rates, epoch_counts and pairs must be non-empty")
        if any(not lr > 0 for lr in lrs):
            raise ValueError("learning rates must be positive")
        if any(e < 1 for e in eps):
            raise ValueError("epoch counts must be >= 1")
        if any(a == b for a, b in pairs):
            raise ValueError("datasets in a pair must differ")
        object.__setattr__(self, "learning_rates", lrs)
        object.__setattr__(self, "epoch_counts", eps)
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def from_dict(cls, raw: dict) -> "AblationGrid":
        allowed = {"learning_rates", "epoch_counts", "pairs", "base_config", "base_seed"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ValueError(f"unknown grid keys: {', '.join(unknown)}")
        missing = sorted({"learning_rates", "epoch_counts", "pairs"} - set(raw))
        if missing:
            raise ValueError(f"missing grid keys: {', '.join(missing)}")
        pairs = []
        for p in raw["pairs"]:
            if isinstance(p, str):
                p = p.replace("->", ",").split(",")
            if len(p) != 2:
                raise ValueError(f"bad pair {p!r}")
            pairs.append((p[0].strip(), p[1].strip()))
        return cls(tuple(raw["learning_rates"]), tuple(raw["epoch_counts"]), tuple(pairs),
                   ExperimentConfig.from_dict(raw.get("base_config", {})),
                   int(raw.get("base_seed", 0)))

    def cells(self) -> list["Cell"]:
        out = []
        for lr in self.learning_rates:
            for ep in self.epoch_counts:
                for a, b in self.pairs:
                    out.append(Cell(len(out), lr, ep, a, b, self.base_seed))
        return out


@dataclass(frozen=True)
class Cell:
    index: int
    lr: float
    epochs: int
    dataset_a: str
    dataset_b: str
    base_seed: int

    @property
    def cell_id(self) -> str:
        return f"lr{self.lr:g}_ep{self.epochs}_{self.dataset_a}-{self.dataset_b}"

    @property
    def seed(self) -> int:
        """``base_seed XOR`` a stable hash of the cell id."""
        digest = hashlib.sha256(self.cell_id.encode()).digest()
        return (self.base_seed ^ int.from_bytes(digest[:8], "little")) & _SEED_MASK


@dataclass(frozen=True)
class ResultRow:
    lr: float
    epochs: int
    pair: tuple[str, str]
    dataset: str
    stage1: float
    stage2: float
    bwt: float | None = None

    def __post_init__(self):
        is_old = self.dataset == self.pair[0]
        if is_old and self.bwt is None:
            raise ValueError("bwt is required on the old-task row")
        if not is_old and self.bwt is not None:
            raise ValueError("bwt only belongs on the old-task row")
        if is_old and self.bwt != self.stage2 - self.stage1:
            raise ValueError("bwt disagrees with stage2 - stage1")

    @property
    def experiment(self) -> str:
        return ARROW.join(self.pair)


def rows_from_report(report: dict) -> list[ResultRow]:
    a, b = report["pair"]
    s1, s2 = report["stage1"]["mae"], report["stage2"]["mae"]
    pair = (a, b)
    return [
        ResultRow(report["lr"], report["epochs"], pair, a, s1[a], s2[a], report["bwt_a"]),
        ResultRow(report["lr"], report["epochs"], pair, b, s1[b], s2[b]),
    ]


def _fmt_bwt(bwt: float) -> str:
    if bwt == 0:
        bwt = 0.0  # avoid "-0.00"
    return f"{bwt:+.2f}"


def render_markdown(rows) -> str:
    lines = ["| " + " | ".join(MD_COLUMNS) + " |",
             "|" + "|".join(["---"] * len(MD_COLUMNS)) + "|"]
    for r in rows:
        cells = [f"{r.lr:g}", str(r.epochs), ARROW.join(x.upper() for x in r.pair),
                 r.dataset.upper(), f"{r.stage1:.2f}", f"{r.stage2:.2f}",
                 "--" if r.bwt is None else _fmt_bwt(r.bwt)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([repr(float(r.lr)), r.epochs, r.experiment, r.dataset,
                         repr(float(r.stage1)), repr(float(r.stage2)),
                         "" if r.bwt is None else repr(float(r.bwt))])
    return buf.getvalue()


def parse_csv(text: str) -> list[ResultRow]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_COLUMNS:
        raise ValueError(f"unexpected columns {reader.fieldnames}")
    rows = []
    for rec in reader:
        a, b = rec["experiment"].split(ARROW)
        rows.append(ResultRow(float(rec["lr"]), int(rec["epochs"]), (a, b), rec["dataset"],
                              float(rec["stage_one"]), float(rec["stage_two"]),
                              float(rec["bwt"]) if rec["bwt"] else None))
    return rows


def write_tables(rows, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "results.csv").write_text(render_csv(rows), encoding="utf-8")
    (out_dir / "results.md").write_text(render_markdown(rows), encoding="utf-8")


def _run_cell(cell: Cell, cfg: ExperimentConfig, series_a: TimeSeries, series_b: TimeSeries,
              cell_dir: str) -> dict:
    cell_cfg = cfg.with_train(lr=cell.lr, epochs=cell.epochs).with_seed(cell.seed)
    ds_a = prepare_dataset(series_a, cell.dataset_a, cell_cfg.window)
    ds_b = prepare_dataset(series_b, cell.dataset_b, cell_cfg.window)
    report = run_protocol(ds_a, ds_b, cell_cfg, out_dir=cell_dir).to_dict()
    report["cell_id"] = cell.cell_id
    report["cell_index"] = cell.index
    Path(cell_dir, "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def run_grid(grid: AblationGrid, out_dir, datasets: dict[str, TimeSeries] | None = None,
             data_seed: int = 0, workers: int = 1) -> list[ResultRow]:
    """Run one protocol per (lr, epochs, pair) cell and write the tables.

    Datasets missing from ``datasets`` are generated from the built-in
    definitions with ``data_seed``. A failing cell is logged and listed in
    ``failures.json``; the remaining cells still run.
    """
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "data").mkdir(exist_ok=True)
    datasets = dict(datasets or {})
    for a, b in grid.pairs:
        for name in (a, b):
            if name not in datasets:
                datasets[name] = synthgen.builtin_series(name, data_seed)
    for name, series in sorted(datasets.items()):
        write_csv(series, out / "data" / f"{name}.csv")

    cells = grid.cells()
    jobs = [(c, grid.base_config, datasets[c.dataset_a], datasets[c.dataset_b],
             str(out / "cells" / c.cell_id)) for c in cells]
    for *_, d in jobs:
        Path(d).mkdir(parents=True, exist_ok=True)

    reports: dict[int, dict] = {}
    failures = []

    def record_failure(cell, exc, tb):
        log.error("cell %s failed: %s", cell.cell_id, exc)
        Path(out, "cells", cell.cell_id, "error.txt").write_text(tb)
        failures.append({"cell_id": cell.cell_id, "error": f"{type(exc).__name__}: {exc}"})

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(job[0], pool.submit(_run_cell, *job)) for job in jobs]
            for cell, fut in futures:
                try:
                    reports[cell.index] = fut.result()
                except Exception as exc:
                    record_failure(cell, exc, traceback.format_exc())
    else:
        for job in jobs:
            cell = job[0]
            log.info("cell %d/%d: %s", cell.index + 1, len(cells), cell.cell_id)
            try:
                reports[cell.index] = _run_cell(*job)
            except Exception as exc:
                record_failure(cell, exc, traceback.format_exc())

    rows = [row for i in sorted(reports) for row in rows_from_report(reports[i])]
    write_tables(rows, out)
    (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return rows


def load_reports(in_dir) -> list[dict]:
    """Every ``report.json`` under ``in_dir``, in grid order."""
    in_dir = Path(in_dir)
    paths = sorted(in_dir.glob("cells/*/report.json"))
    if (in_dir / "report.json").is_file():
        paths.insert(0, in_dir / "report.json")
    reports = [json.loads(p.read_text()) for p in paths]
    for rep, p in zip(reports, paths):
        rep["_dir"] = str(p.parent)
    reports.sort(key=lambda r: r.get("cell_index", -1))
    return reports


def _svg_polyline(xs, ys, to_px, color, dash=None) -> str:
    pts = " ".join(f"{px:.2f},{py:.2f}" for px, py in (to_px(x, y) for x, y in zip(xs, ys)))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{extra} points="{pts}"/>'


def render_svg(actual, predicted, horizon_start: int, title: str,
               width: int = 900, height: int = 320) -> str:
    """Line chart: full actual trace plus the forecast over the horizon."""
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    n = len(actual)
    ml, mr, mt, mb = 60, 20, 30, 45
    lo = float(min(actual.min(), predicted.min()))
    hi = float(max(actual.max(), predicted.max()))
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    pw, ph = width - ml - mr, height - mt - mb

    def to_px(x, y):
        return ml + pw * x / max(n - 1, 1), mt + ph * (hi - y) / (hi - lo)

    x0, _ = to_px(horizon_start, lo)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{x0:.2f}" y1="{mt}" x2="{x0:.2f}" y2="{mt + ph}" stroke="gray" '
        f'stroke-dasharray="4,3"/>',
        f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle" font-size="12">'
        f'time step in window</text>',
        f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {mt + ph / 2})">standardized value</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = lo + frac * (hi - lo)
        _, yp = to_px(0, yv)
        parts.append(f'<text x="{ml - 5}" y="{yp + 4:.2f}" text-anchor="end" font-size="10">'
                     f'{yv:.2f}</text>')
    parts.append(_svg_polyline(range(n), actual, to_px, "#1f77b4"))
    parts.append(_svg_polyline(range(horizon_start, horizon_start + len(predicted)),
                               predicted, to_px, "#d62728"))
    parts.append(f'<text x="{ml + pw - 150}" y="{mt + 12}" font-size="11" fill="#1f77b4">actual</text>')
    parts.append(f'<text x="{ml + pw - 90}" y="{mt + 12}" font-size="11" fill="#d62728">forecast</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_forecast_plot(dataset: PreparedDataset, model, window_index: int, out_path,
                       wcfg: WindowConfig | None = None, region: str = "test",
                       title: str | None = None) -> tuple[Path, Path]:
    """Write ``<out_path>.csv`` and ``<out_path>.svg`` for one eval window.

    The CSV has one row per context and horizon step; ``predicted`` is
    empty on context rows. Values are in standardized units.
    """
    wcfg = wcfg or WindowConfig()
    windows = dataset.eval_windows(wcfg, region)
    if not 0 <= window_index < len(windows):
        raise IndexError(f"window {window_index} out of range; {dataset.name} has {len(windows)}")
    ctx = windows.contexts[window_index]
    tgt = windows.targets[window_index]
    pred = np.asarray(_predictor(model)(ctx[None, :]))[0]
    start = int(windows.target_start_indices[window_index]) - wcfg.context_len
    actual = np.concatenate([ctx, tgt])
    stamps = dataset.series.timestamps[start:start + len(actual)]

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path.with_suffix(".csv")
    svg_path = out_path.with_suffix(".svg")
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "actual", "predicted"])
        for i, (ts, a) in enumerate(zip(stamps, actual)):
            j = i - wcfg.context_len
            writer.writerow([ts.strftime("%Y-%m-%d %H:%M:%S"), repr(float(a)),
                             repr(float(pred[j])) if j >= 0 else ""])
    title = title or f"{dataset.name.upper()} {region} window {window_index}"
    svg_path.write_text(render_svg(actual, pred, wcfg.context_len, title), encoding="utf-8")
    return csv_path, svg_path


def dataset_from_dir(in_dir, name: str, wcfg: WindowConfig) -> PreparedDataset:
    path = Path(in_dir) / "data" / f"{name}.csv"
    return prepare_dataset(read_csv(path), name, wcfg)

