import json
import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsforget.continual import prepare_dataset
from tsforget.forecaster import ModelConfig, init_params
from tsforget.pipeline import WindowConfig
from tsforget.report import (AblationGrid, ResultRow, emit_forecast_plot, load_reports,
                             parse_csv, render_csv, render_markdown, rows_from_report, run_grid)
from tsforget.synthgen import GenerationConfig, builtin_series, builtin_spec, generate_series

from conftest import TINY


def _table1_rows():
    pair = ("d1", "d2")
    return [
        ResultRow(1e-4, 5, pair, "d1", 0.15, 1.60, 1.60 - 0.15),
        ResultRow(1e-4, 5, pair, "d2", 1.27, 0.08),
    ]


def test_markdown_table1_row():
    md = render_markdown(_table1_rows())
    assert "Experiment | Dataset | Stage one | Stage two | BWT" in md
    assert "| D1 | 0.15 | 1.60 | +1.45 |" in md
    assert "| D2 | 1.27 | 0.08 | -- |" in md


def test_markdown_empty_is_header_only():
    lines = render_markdown([]).strip().splitlines()
    assert len(lines) == 2 and lines[0].startswith("| LR")


def test_markdown_zero_bwt_sign():
    row = ResultRow(1e-5, 5, ("d3", "d4"), "d3", 0.5, 0.5, 0.0)
    assert "+0.00" in render_markdown([row])


def test_row_bwt_must_match_stages():
    with pytest.raises(ValueError):
        ResultRow(1e-4, 5, ("d1", "d2"), "d1", 0.15, 1.60, 1.5)
    with pytest.raises(ValueError):
        ResultRow(1e-4, 5, ("d1", "d2"), "d2", 0.15, 1.60, 1.45)


mae = st.floats(0, 10, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-9, 1.0), st.integers(1, 50), mae, mae, mae, mae),
                max_size=8))
def test_csv_round_trip_lossless(cells):
    rows = []
    for lr, ep, a1, a2, b1, b2 in cells:
        rows.append(ResultRow(lr, ep, ("d1", "d2"), "d1", a1, a2, a2 - a1))
        rows.append(ResultRow(lr, ep, ("d1", "d2"), "d2", b1, b2))
    assert parse_csv(render_csv(rows)) == rows


def test_grid_dedup_and_order():
    grid = AblationGrid((1e-4, 1e-5, 1e-4), (5, 5), (("d1", "d2"), ("d3", "d4"), ("d1", "d2")))
    cells = grid.cells()
    assert len(cells) == 4
    assert [(c.lr, c.dataset_a) for c in cells] == [(1e-4, "d1"), (1e-4, "d3"), (1e-5, "d1"), (1e-5, "d3")]
    assert len({c.seed for c in cells}) == 4


def test_cell_seed_is_stable_across_grids():
    a = AblationGrid((1e-4,), (5,), (("d1", "d2"),), base_seed=3).cells()[0]
    b = AblationGrid((1e-5, 1e-4), (5,), (("d1", "d2"),), base_seed=3).cells()[1]
    assert a.cell_id == b.cell_id and a.seed == b.seed


def test_grid_validation():
    with pytest.raises(ValueError):
        AblationGrid((), (5,), (("d1", "d2"),))
    with pytest.raises(ValueError):
        AblationGrid((-1.0,), (5,), (("d1", "d2"),))
    with pytest.raises(ValueError):
        AblationGrid.from_dict({"learning_rates": [1e-4], "epoch_counts": [5],
                                "pairs": [["d1", "d2"]], "bogus": 1})


def _tiny_grid(lrs, epochs, pairs, seed=0):
    return AblationGrid.from_dict({"learning_rates": lrs, "epoch_counts": epochs,
                                   "pairs": pairs, "base_config": TINY, "base_seed": seed})


def test_run_grid_table2_shape(tmp_path):
    grid = _tiny_grid([1e-4, 1e-5, 1e-6, 1e-7], [1], [["d1", "d2"], ["d3", "d4"]])
    rows = run_grid(grid, tmp_path)
    assert len(rows) == 16
    assert len(list(tmp_path.glob("cells/*/report.json"))) == 8
    assert [r.dataset for r in rows[:4]] == ["d1", "d2", "d3", "d4"]
    assert [r.lr for r in rows[::4]] == [1e-4, 1e-5, 1e-6, 1e-7]
    for cell in tmp_path.glob("cells/*"):
        assert {p.name for p in cell.iterdir()} == {"stage1.ckpt", "stage2.ckpt", "report.json"}
    rep = json.loads(next(tmp_path.glob("cells/*/report.json")).read_text())
    for key in ("pair", "lr", "epochs", "seed", "stage1", "stage2", "bwt_a"):
        assert key in rep
    assert set(rep["stage1"]["mae"]) == set(rep["pair"])
    assert (tmp_path / "results.md").is_file()
    assert parse_csv((tmp_path / "results.csv").read_text()) == rows


def test_run_grid_minimal_and_reproducible(tmp_path):
    grid = _tiny_grid([1e-3], [1], [["d1", "d2"]], seed=4)
    rows = run_grid(grid, tmp_path / "a")
    run_grid(grid, tmp_path / "b")
    assert len(rows) == 2
    for name in ("results.csv", "results.md", "cells/lr0.001_ep1_d1-d2/report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_grid_records_failures_and_continues(tmp_path):
    short = generate_series(builtin_spec("d2", 0), GenerationConfig(n_steps=40))
    grid = _tiny_grid([1e-3], [1], [["short", "d2"], ["d1", "d2"]])
    rows = run_grid(grid, tmp_path, datasets={"short": short})
    assert [r.dataset for r in rows] == ["d1", "d2"]
    failures = json.loads((tmp_path / "failures.json").read_text())
    assert [f["cell_id"] for f in failures] == ["lr0.001_ep1_short-d2"]
    assert (tmp_path / "cells" / "lr0.001_ep1_short-d2" / "error.txt").is_file()


def test_load_reports_preserves_grid_order(tmp_path):
    grid = _tiny_grid([1e-3, 1e-4], [1], [["d3", "d4"], ["d1", "d2"]])
    rows = run_grid(grid, tmp_path)
    again = [r for rep in load_reports(tmp_path) for r in rows_from_report(rep)]
    assert again == rows


def test_forecast_plot_oracle_stub(tmp_path):
    ds = prepare_dataset(builtin_series("d1", 0), "d1")
    wcfg = WindowConfig()
    targets = ds.eval_windows(wcfg).targets
    stub = lambda ctx: targets[1:2]
    csv_path, svg_path = emit_forecast_plot(ds, stub, 1, tmp_path / "plots" / "d1_w1", wcfg)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "timestamp,actual,predicted"
    assert len(lines) == 256 + 128 + 1
    horizon = [ln.split(",") for ln in lines[257:]]
    assert all(a == p for _, a, p in horizon)
    assert all(ln.split(",")[2] == "" for ln in lines[1:257])
    # window 1 of the test region targets index 2412
    assert horizon[0][0] == ds.series.timestamps[2412].strftime("%Y-%m-%d %H:%M:%S")

    root = ET.parse(svg_path).getroot()
    polylines = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert len(polylines) == 2
    assert "standardized" in svg_path.read_text()


def test_forecast_plot_bad_window(tmp_path):
    ds = prepare_dataset(builtin_series("d1", 0), "d1")
    with pytest.raises(IndexError):
        emit_forecast_plot(ds, init_params(ModelConfig()), 3, tmp_path / "x")


def test_parallel_grid_matches_serial(tmp_path):
    grid = _tiny_grid([1e-3, 1e-4], [1], [["d1", "d2"]], seed=2)
    serial = run_grid(grid, tmp_path / "serial")
    parallel = run_grid(grid, tmp_path / "parallel", workers=2)
    assert serial == parallel
    assert (tmp_path / "serial" / "results.csv").read_bytes() == \
        (tmp_path / "parallel" / "results.csv").read_bytes()
