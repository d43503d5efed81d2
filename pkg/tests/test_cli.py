from __future__ import annotations

import csv

import pytest

from tqd.cli import EXIT_CONFIG, EXIT_IO, main
from tqd.config import DEFAULTS, ConfigError, RunConfig
from tqd.experiment import (
    CSV_COLUMNS,
    GridError,
    SchemaError,
    emit_report,
    expand_grid,
    format_csv,
    load_grid,
    parse_grid,
    preset_names,
    read_metric_csvs,
    run_ablation,
    run_experiment,
    summarize,
)

TINY = {
    "scenario.n_frames": "4",
    "scenario.n_objects_init": "3",
    "training.steps": "3",
    "training.n_train_scenes": "2",
    "eval.n_eval_scenes": "1",
    "tracker.n_det_queries": "8",
    "tracker.feature_dim": "16",
    "denoising.n_groups": "1",
    "denoising.strategy": "general",
}


def tiny_text(**extra: str) -> str:
    vals = dict(TINY, **extra)
    return "".join(f"{k} = {v}\n" for k, v in vals.items())


# -- config -----------------------------------------------------------------

def test_defaults_round_trip_through_text():
    cfg = RunConfig()
    again = RunConfig.from_text(cfg.to_text())
    assert again.values == cfg.values == DEFAULTS


def test_config_comments_and_types():
    cfg = RunConfig.from_text("# header\ntracker.paradigm = TBD  # inline\neval.seeds = 0, 3\n"
                              "denoising.dn_assoc_loss = off\ntraining.lr = 5e-4\n")
    assert cfg["tracker.paradigm"] == "TBD"
    assert cfg["eval.seeds"] == (0, 3)
    assert cfg["denoising.dn_assoc_loss"] is False
    assert cfg["training.lr"] == 5e-4


def test_unknown_key_is_rejected_with_its_name():
    with pytest.raises(ConfigError) as exc:
        RunConfig.from_text("tracker.frobnicate = 3\n")
    assert exc.value.key == "tracker.frobnicate"


@pytest.mark.parametrize("text, key", [
    ("training.steps = many\n", "training.steps"),
    ("denoising.mode = sometimes\n", "denoising.mode"),
    ("eval.threshold = -1\n", "eval.threshold"),
    ("denoising.n_groups = -2\n", "denoising.n_groups"),
    ("denoising.dn_assoc_loss = maybe\n", "denoising.dn_assoc_loss"),
])
def test_invalid_values_name_the_key(text, key):
    with pytest.raises(ConfigError) as exc:
        RunConfig.from_text(text)
    assert exc.value.key == key


def test_content_hash_ignores_denoising_keys_when_off():
    a = RunConfig.from_overrides({"denoising.mode": "off", "denoising.sigma_query": "0.3"})
    b = RunConfig.from_overrides({"denoising.mode": "off", "training.lambda_dn": "0.0"})
    assert a.content_hash() == b.content_hash()
    c = RunConfig.from_overrides({"denoising.sigma_query": "0.3"})
    assert c.content_hash() != RunConfig().content_hash()


def test_zero_groups_means_off():
    cfg = RunConfig.from_overrides({"denoising.n_groups": "0"})
    assert cfg.denoising_mode == "off"
    assert cfg.content_hash() == RunConfig.from_overrides({"denoising.mode": "off"}).content_hash()


# -- grids ------------------------------------------------------------------

EXPECTED_CELLS = {
    "table1_paradigm_mode": 9,
    "table3_groups": 6,
    "table4_noise_types": 8,
    "table5_query_init": 4,
    "tableA_fp_drop": 6,
    "tableB_noise_scales": 7,
    "tableC_det_queries": 3,
}


def test_all_presets_are_bundled():
    assert preset_names() == sorted(EXPECTED_CELLS)


@pytest.mark.parametrize("name", sorted(EXPECTED_CELLS))
def test_preset_cell_counts(name):
    grid = load_grid(name)
    grid.seeds = [0]
    cells, _ = expand_grid(grid)
    assert len(cells) == EXPECTED_CELLS[name]
    assert len({c.key for c in cells}) == len(cells)
    grid.seeds = [0, 1, 2]
    assert len(expand_grid(grid)[0]) == 3 * EXPECTED_CELLS[name]


def test_table3_cells_and_skips():
    cells, skipped = expand_grid(load_grid("table3_groups"))
    got = sorted({(c.config.denoising_mode == "off", c.labels["denoising.n_groups"], c.labels["denoising.strategy"])
                  for c in cells})
    assert got == [(False, "1", "general"), (False, "3", "dedicated"), (False, "3", "general"),
                   (False, "5", "general"), (False, "5", "hybrid"), (True, "0", "general")]
    assert len(skipped) == 4  # 1 x {dedicated, hybrid}, 3 x hybrid, 5 x dedicated


def test_table1_axes():
    cells, _ = expand_grid(load_grid("table1_paradigm_mode"))
    combos = {(c.config["tracker.paradigm"], c.config.denoising_mode) for c in cells}
    assert combos == {(p, m) for p in ("TBA", "TBD", "ADA") for m in ("off", "static", "temporal")}


def test_strategy_only_grid_has_three_rows():
    # Each strategy at the group count it admits.
    grid = parse_grid("cell.general = denoising.strategy=general\n"
                      "cell.dedicated = denoising.strategy=dedicated; denoising.n_groups=3\n"
                      "cell.hybrid = denoising.strategy=hybrid\nseeds = 0\n")
    cells, skipped = expand_grid(grid)
    assert [c.labels["cell"] for c in cells] == ["general", "dedicated", "hybrid"] and not skipped


def test_grid_order_is_deterministic():
    grid = load_grid("table4_noise_types")
    a = [c.key for c in expand_grid(grid)[0]]
    b = [c.key for c in expand_grid(grid)[0]]
    assert a == b


@pytest.mark.parametrize("text", ["", "# nothing\n", "seeds = 0\n"])
def test_empty_grid_is_an_error(text):
    with pytest.raises(GridError):
        parse_grid(text)


def test_grid_with_unknown_key_is_an_error():
    with pytest.raises(ConfigError):
        parse_grid("axis.tracker.nonsense = 1,2\n")


def test_grid_where_every_cell_is_invalid_is_an_error(tmp_path):
    grid = parse_grid("base.denoising.strategy = hybrid\naxis.denoising.n_groups = 1,2\n")
    with pytest.raises(GridError):
        run_ablation(grid, tmp_path)


# -- runs -------------------------------------------------------------------

def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_all_artifacts_and_is_deterministic(tmp_path):
    cfg = RunConfig.from_text(tiny_text())
    row_a = run_experiment(cfg, tmp_path / "a")
    row_b = run_experiment(cfg, tmp_path / "b")
    for name in ("config.txt", "train_log.csv", "checkpoint.bin", "tracks.csv", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert row_a == row_b
    (row,) = read_rows(tmp_path / "a" / "metrics.csv")
    assert list(row) == list(CSV_COLUMNS)
    assert all(row[c] != "" for c in CSV_COLUMNS)


def test_zero_dn_weight_run_matches_denoising_off(tmp_path):
    on = RunConfig.from_text(tiny_text(**{"training.lambda_dn": "0.0"}))
    off = RunConfig.from_text(tiny_text(**{"denoising.mode": "off"}))
    a = run_experiment(on, tmp_path / "on")
    b = run_experiment(off, tmp_path / "off")
    metric_cols = [c for c in CSV_COLUMNS if c not in ("run_id", "denoising_mode")]
    assert [a[c] for c in metric_cols] == [b[c] for c in metric_cols]
    assert (tmp_path / "on" / "tracks.csv").read_bytes() == (tmp_path / "off" / "tracks.csv").read_bytes()


def test_ablation_resumes_completed_cells(tmp_path):
    grid = parse_grid("axis.denoising.mode = off,temporal\nseeds = 0\n")
    base = RunConfig.from_text(tiny_text())
    rows, _ = run_ablation(grid, tmp_path, base=base)
    assert len(rows) == 2
    first = (tmp_path / "ablation.csv").read_bytes()
    stamps = {p: p.stat().st_mtime_ns for p in (tmp_path / "cells").rglob("metrics.csv")}
    run_ablation(grid, tmp_path, base=base)
    assert {p: p.stat().st_mtime_ns for p in (tmp_path / "cells").rglob("metrics.csv")} == stamps
    assert (tmp_path / "ablation.csv").read_bytes() == first


# -- reports ----------------------------------------------------------------

def metric_row(run_id, seed, amota, mode="temporal"):
    return {"run_id": run_id, "paradigm": "ADA", "denoising_mode": mode, "seed": seed, "AMOTA": amota,
            "AMOTP": 1.0, "MOTA": 0.5, "Recall": 0.5, "IDS": 1, "FP": 2, "FN": 3, "TP": 4}


def write_metrics(path, rows, columns=CSV_COLUMNS):
    path.write_text(format_csv(rows, columns), encoding="utf-8")
    return path


def test_report_mean_and_population_std(tmp_path):
    p = write_metrics(tmp_path / "m.csv", [metric_row("a", 0, 0.1), metric_row("b", 1, 0.2),
                                           metric_row("c", 2, 0.6), metric_row("d", 0, 0.3, "off")])
    header, rows = read_metric_csvs([p])
    group_cols, summary = summarize(header, rows)
    assert group_cols == ["paradigm", "denoising_mode"]
    temporal = next(e for e in summary if e["denoising_mode"] == "temporal")
    assert temporal["n_seeds"] == 3
    assert temporal["AMOTA_mean"] == pytest.approx(0.3)
    assert temporal["AMOTA_std"] == pytest.approx((((0.2 ** 2) + 0.1 ** 2 + 0.3 ** 2) / 3) ** 0.5)
    md, svg = emit_report([p], tmp_path / "out")
    text = md.read_text()
    assert "AMOTA" in text and "±" in text and text.count("\n") == 4
    assert svg.read_text().startswith("<svg")


def test_single_row_report_is_one_row_with_degenerate_plot(tmp_path):
    p = write_metrics(tmp_path / "m.csv", [metric_row("a", 0, 0.4)])
    md, svg = emit_report([p], tmp_path / "out")
    assert md.read_text().count("\n") == 3
    assert "<polyline" not in svg.read_text() and "<circle" in svg.read_text()


def test_report_bytes_are_deterministic(tmp_path):
    p = write_metrics(tmp_path / "m.csv", [metric_row("a", 0, 0.1), metric_row("b", 1, 0.2)])
    md1, svg1 = emit_report([p], tmp_path / "o1")
    md2, svg2 = emit_report([p], tmp_path / "o2")
    assert md1.read_bytes() == md2.read_bytes() and svg1.read_bytes() == svg2.read_bytes()


def test_report_schema_mismatch(tmp_path):
    a = write_metrics(tmp_path / "a.csv", [metric_row("a", 0, 0.1)])
    b = write_metrics(tmp_path / "b.csv", [dict(metric_row("b", 0, 0.1), extra=1)], list(CSV_COLUMNS) + ["extra"])
    with pytest.raises(SchemaError):
        read_metric_csvs([a, b])
    c = write_metrics(tmp_path / "c.csv", [metric_row("c", 0, 0.1)], [c for c in CSV_COLUMNS if c != "MOTA"])
    with pytest.raises(SchemaError):
        read_metric_csvs([c])


# -- command line -----------------------------------------------------------

def test_cli_bad_config_exits_2_and_names_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("denoising.lambda_centre = 1\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "denoising.lambda_centre" in capsys.readouterr().err


def test_cli_missing_config_file_exits_3(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == EXIT_IO


def test_cli_missing_checkpoint_exits_3(tmp_path):
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "none.bin")]) == EXIT_IO


def test_cli_report_schema_mismatch_exits_2(tmp_path):
    p = write_metrics(tmp_path / "m.csv", [metric_row("a", 0, 0.1)], ["run_id", "AMOTA"])
    assert main(["report", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cli_train_eval_and_inference_identity(tmp_path, monkeypatch):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(tiny_text())
    monkeypatch.setenv("TQD_OUT_DIR", str(tmp_path / "env_out"))
    assert main(["--config", str(cfg), "train"]) == 0
    ckpt = tmp_path / "env_out" / "checkpoint.bin"
    assert ckpt.exists() and (tmp_path / "env_out" / "train_log.csv").exists()
    off = tmp_path / "off.cfg"
    off.write_text(tiny_text(**{"denoising.mode": "off"}))
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(tmp_path / "t")]) == 0
    assert main(["eval", "--config", str(off), "--checkpoint", str(ckpt), "--out", str(tmp_path / "f")]) == 0
    assert (tmp_path / "t" / "tracks.csv").read_bytes() == (tmp_path / "f" / "tracks.csv").read_bytes()


def test_cli_gen_data_then_train_from_files(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(tiny_text())
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "data" / "train").is_dir() and (tmp_path / "data" / "eval").is_dir()
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "files"), "--data", str(tmp_path / "data")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "mem")]) == 0
    assert (tmp_path / "files" / "metrics.csv").read_bytes() == (tmp_path / "mem" / "metrics.csv").read_bytes()


def test_cli_ablate_grid_file_writes_csv_and_report(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(tiny_text())
    grid = tmp_path / "modes.grid"
    grid.write_text("name = modes\naxis.denoising.mode = off,static\nseeds = 0,1\n")
    assert main(["ablate", str(grid), "--config", str(cfg), "--out", str(tmp_path / "o"), "--threads", "2"]) == 0
    rows = read_rows(tmp_path / "o" / "modes" / "ablation.csv")
    assert len(rows) == 4
    assert [(r["denoising.mode"], r["seed"]) for r in rows] == [("off", "0"), ("off", "1"), ("static", "0"),
                                                               ("static", "1")]
    assert (tmp_path / "o" / "modes" / "report.md").exists()
    assert (tmp_path / "o" / "modes" / "report.svg").exists()


def test_cli_unknown_grid_preset_exits_3(tmp_path):
    assert main(["ablate", "no_such_grid", "--out", str(tmp_path)]) == EXIT_IO
