"""Experiment runner: single runs, ablation grids and reports.

A run trains one tracker and evaluates it on held-out scenes.  A grid
expands into many runs; each run is stored under ``cells/<hash>/`` where the
hash covers the effective configuration, so re-running a grid skips cells
that already finished.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .config import DEFAULTS, ConfigError, RunConfig
from .metrics import METRIC_COLUMNS, MetricReport, evaluate, write_track_results
from .sim import SceneData, make_dataset, read_scene_data
from .tracker import Tracker, load_checkpoint, save_checkpoint, track_scene
from .training import train

ID_COLUMNS = ("run_id", "paradigm", "denoising_mode", "seed")
CSV_COLUMNS = ID_COLUMNS + METRIC_COLUMNS
GRID_DIR = Path(__file__).parent / "grids"


class GridError(ValueError):
    pass


# -- single runs ------------------------------------------------------------

def training_data(cfg: RunConfig, data_dir: Path | None = None) -> list[SceneData]:
    n = cfg["training.n_train_scenes"]
    if data_dir is not None:
        return [read_scene_data(Path(data_dir) / "train", i, cfg["scenario.dt"]) for i in range(n)]
    return make_dataset(cfg.scenario(), cfg["training.data_seed"], "train", n)


def eval_data(cfg: RunConfig) -> list[SceneData]:
    out = []
    for s in cfg["eval.seeds"]:
        out.extend(make_dataset(cfg.scenario(), cfg["training.data_seed"], "eval", cfg["eval.n_eval_scenes"], s))
    return out


def train_model(cfg: RunConfig, out_dir: Path | None = None, data_dir: Path | None = None) -> Tracker:
    model = Tracker.create(cfg.tracker(), cfg["training.seed"])
    log = Path(out_dir) / "train_log.csv" if out_dir is not None else None
    train(model, training_data(cfg, data_dir), cfg.training(), log)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint.bin", model)
    return model


def evaluate_model(model: Tracker, cfg: RunConfig, out_dir: Path | None = None) -> MetricReport:
    """Track every eval scene (all eval seeds, in order) and score the result."""
    data = eval_data(cfg)
    results = [track_scene(model, d.observations) for d in data]
    if out_dir is not None:
        write_track_results(Path(out_dir) / "tracks.csv", results)
    return evaluate(results, [d.scene.frames for d in data], cfg["eval.threshold"])


def metrics_row(cfg: RunConfig, report: MetricReport, run_id: str | None = None) -> dict[str, Any]:
    row = {
        "run_id": run_id or cfg.content_hash(),
        "paradigm": cfg["tracker.paradigm"],
        "denoising_mode": cfg.denoising_mode,
        "seed": cfg["training.seed"],
    }
    row.update(report.as_dict())
    return row


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def format_csv(rows: Sequence[dict[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def run_experiment(cfg: RunConfig, out_dir: Path, data_dir: Path | None = None) -> dict[str, Any]:
    """Train, evaluate and write config, log, checkpoint, tracks and metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    model = train_model(cfg, out_dir, data_dir)
    row = metrics_row(cfg, evaluate_model(model, cfg, out_dir))
    (out_dir / "metrics.csv").write_text(format_csv([row], CSV_COLUMNS), encoding="utf-8")
    return row


def evaluate_checkpoint(path: Path, cfg: RunConfig, out_dir: Path) -> dict[str, Any]:
    """Evaluate a saved model.  Denoising settings in ``cfg`` play no part."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(path)
    row = metrics_row(cfg, evaluate_model(model, cfg, out_dir))
    (out_dir / "metrics.csv").write_text(format_csv([row], CSV_COLUMNS), encoding="utf-8")
    return row


# -- grids ------------------------------------------------------------------

@dataclass
class Grid:
    name: str
    base: dict[str, str]
    axes: list[tuple[str, list[str]]]
    cells: list[tuple[str, dict[str, str]]]
    seeds: list[int]

    @property
    def axis_columns(self) -> list[str]:
        cols = ["cell"] if self.cells else []
        return cols + [k for k, _ in self.axes]


def parse_grid(text: str, source: str = "<grid>") -> Grid:
    """Grid file lines: ``name = …``, ``seeds = 0,1``, ``base.<key> = v``,
    ``axis.<key> = v1,v2,…`` and ``cell.<label> = key=v; key=v``."""
    name, base, axes, cells, seeds = Path(source).stem, {}, [], [], [0]
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GridError(f"{source}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "name":
            name = value
        elif key == "seeds":
            try:
                seeds = [int(v) for v in value.split(",") if v.strip()]
            except ValueError:
                raise GridError(f"{source}:{lineno}: seeds must be integers") from None
        elif key.startswith("base."):
            base[_checked(key[5:], source, lineno)] = value
        elif key.startswith("axis."):
            values = [v.strip() for v in value.split(",") if v.strip()]
            if not values:
                raise GridError(f"{source}:{lineno}: axis {key[5:]} has no values")
            axes.append((_checked(key[5:], source, lineno), values))
        elif key.startswith("cell."):
            assigns = {}
            for part in value.split(";"):
                if not part.strip():
                    continue
                if "=" not in part:
                    raise GridError(f"{source}:{lineno}: cell entry {part!r} is not key=value")
                k, v = (p.strip() for p in part.split("=", 1))
                assigns[_checked(k, source, lineno)] = v
            cells.append((key[5:], assigns))
        else:
            raise GridError(f"{source}:{lineno}: unknown grid entry {key!r}")
    if not axes and not cells:
        raise GridError(f"{source}: grid defines no axes and no cells")
    if not seeds:
        raise GridError(f"{source}: no seeds")
    return Grid(name, base, axes, cells, seeds)


def _checked(key: str, source: str, lineno: int) -> str:
    if key not in DEFAULTS:
        raise ConfigError(key, f"unknown key ({source}:{lineno})")
    return key


def load_grid(spec: str) -> Grid:
    """A path to a grid file, or the name of a bundled preset."""
    path = Path(spec)
    if not path.exists():
        preset = GRID_DIR / f"{spec}.grid"
        if not preset.exists():
            raise FileNotFoundError(f"no grid file or preset named {spec!r}")
        path = preset
    return parse_grid(path.read_text(encoding="utf-8"), str(path))


def preset_names() -> list[str]:
    return sorted(p.stem for p in GRID_DIR.glob("*.grid"))


@dataclass
class GridCell:
    config: RunConfig
    labels: dict[str, str]

    @property
    def key(self) -> str:
        return self.config.content_hash()


def expand_grid(grid: Grid, base: RunConfig | None = None) -> tuple[list[GridCell], list[str]]:
    """Cells in deterministic order (cells, then axes, then seeds).

    Combinations the configuration rejects are skipped and reported;
    combinations equivalent to an earlier one (same effective config) are
    dropped, e.g. every strategy at zero denoising groups.
    """
    base = (base or RunConfig()).with_overrides(grid.base)
    cell_list = grid.cells or [("", {})]
    out, skipped, seen = [], [], set()
    for label, assigns in cell_list:
        for combo in itertools.product(*[vals for _, vals in grid.axes]):
            overrides = dict(assigns)
            labels = {"cell": label} if grid.cells else {}
            for (k, _), v in zip(grid.axes, combo):
                overrides[k] = v
                labels[k] = v
            for seed in grid.seeds:
                overrides["training.seed"] = str(seed)
                try:
                    cfg = base.with_overrides(overrides)
                except ConfigError as exc:
                    if seed == grid.seeds[0]:
                        skipped.append(f"{labels}: {exc}")
                    continue
                h = cfg.content_hash()
                if h in seen:
                    continue
                seen.add(h)
                out.append(GridCell(cfg, labels))
    return out, skipped


def _run_cell(args: tuple[str, Path, Path | None]) -> dict[str, Any]:
    text, cell_dir, data_dir = args
    return run_experiment(RunConfig.from_text(text), cell_dir, data_dir)


def _read_row(path: Path) -> dict[str, Any]:
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.DictReader(fh))


def run_ablation(grid: Grid, out_dir: Path, threads: int = 1, base: RunConfig | None = None,
                 data_dir: Path | None = None) -> tuple[list[dict[str, Any]], list[str]]:
    """Run every grid cell (resuming finished ones) and write ``ablation.csv``."""
    out_dir = Path(out_dir)
    cells, skipped = expand_grid(grid, base)
    if not cells:
        raise GridError("grid expands to no valid cells")
    todo = []
    for c in cells:
        cell_dir = out_dir / "cells" / c.key
        if not (cell_dir / "metrics.csv").exists():
            todo.append((c.config.to_text(), cell_dir, data_dir))
    if threads > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_run_cell, todo))
    else:
        for job in todo:
            _run_cell(job)
    rows = []
    for c in cells:
        row = _read_row(out_dir / "cells" / c.key / "metrics.csv")
        row.update(c.labels)
        rows.append(row)
    columns = list(CSV_COLUMNS) + grid.axis_columns
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text(format_csv(rows, columns), encoding="utf-8")
    return rows, skipped


# -- reports ----------------------------------------------------------------

class SchemaError(ValueError):
    pass


def read_metric_csvs(paths: Iterable[Path]) -> tuple[list[str], list[dict[str, str]]]:
    header: list[str] | None = None
    rows: list[dict[str, str]] = []
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            cols = list(reader.fieldnames or [])
            missing = [c for c in CSV_COLUMNS if c not in cols]
            if missing:
                raise SchemaError(f"{p}: missing columns {missing}")
            if header is not None and cols != header:
                raise SchemaError(f"{p}: columns {cols} differ from {header}")
            header = cols
            rows.extend(reader)
    if header is None:
        raise SchemaError("no CSV files given")
    return header, rows


def summarize(header: Sequence[str], rows: Sequence[dict[str, str]]) -> tuple[list[str], list[dict[str, Any]]]:
    """Mean and population std over seeds for every group of equal settings."""
    group_cols = [c for c in header if c not in METRIC_COLUMNS and c not in ("run_id", "seed")]
    groups: dict[tuple, list[dict[str, str]]] = {}
    for r in rows:
        groups.setdefault(tuple(r[c] for c in group_cols), []).append(r)
    out = []
    for key, members in groups.items():
        entry: dict[str, Any] = dict(zip(group_cols, key))
        entry["n_seeds"] = len(members)
        for m in METRIC_COLUMNS:
            vals = np.array([float(r[m]) for r in members])
            entry[f"{m}_mean"] = float(vals.mean())
            entry[f"{m}_std"] = float(vals.std())
        out.append(entry)
    return group_cols, out


def markdown_table(group_cols: Sequence[str], summary: Sequence[dict[str, Any]]) -> str:
    head = list(group_cols) + ["n_seeds"] + list(METRIC_COLUMNS)
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for e in summary:
        cells = [str(e[c]) for c in group_cols] + [str(e["n_seeds"])]
        for m in METRIC_COLUMNS:
            digits = 4 if m in ("AMOTA", "AMOTP", "MOTA", "Recall") else 1
            cells.append(f"{e[m + '_mean']:.{digits}f} ± {e[m + '_std']:.{digits}f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def svg_plot(group_cols: Sequence[str], summary: Sequence[dict[str, Any]], metric: str = "AMOTA") -> str:
    """Line plot of ``metric`` (mean ± std error bars) over the summary rows."""
    w, h, pad = 640, 360, 50
    n = len(summary)
    means = [e[f"{metric}_mean"] for e in summary]
    stds = [e[f"{metric}_std"] for e in summary]
    lo = min(m - s for m, s in zip(means, stds))
    hi = max(m + s for m, s in zip(means, stds))
    if math.isclose(lo, hi):
        lo, hi = lo - 0.5, hi + 0.5

    def sx(i: int) -> float:
        return pad + (w - 2 * pad) * (0.5 if n == 1 else i / (n - 1))

    def sy(v: float) -> float:
        return h - pad - (h - 2 * pad) * (v - lo) / (hi - lo)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{pad - 15}" font-size="14">{metric} (mean ± std)</text>',
        f'<text x="{pad - 5}" y="{sy(hi):.2f}" font-size="10" text-anchor="end">{hi:.4f}</text>',
        f'<text x="{pad - 5}" y="{sy(lo):.2f}" font-size="10" text-anchor="end">{lo:.4f}</text>',
    ]
    if n > 1:
        pts = " ".join(f"{sx(i):.2f},{sy(m):.2f}" for i, m in enumerate(means))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>')
    for i, (m, s) in enumerate(zip(means, stds)):
        x = sx(i)
        parts.append(f'<line x1="{x:.2f}" y1="{sy(m - s):.2f}" x2="{x:.2f}" y2="{sy(m + s):.2f}" stroke="gray"/>')
        parts.append(f'<circle cx="{x:.2f}" cy="{sy(m):.2f}" r="3" fill="steelblue"/>')
        label = "/".join(str(summary[i][c]) for c in group_cols)
        parts.append(f'<text x="{x:.2f}" y="{h - pad + 15}" font-size="9" text-anchor="middle">{_xml(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_report(paths: Sequence[Path], out_dir: Path, name: str = "report") -> tuple[Path, Path]:
    header, rows = read_metric_csvs(paths)
    group_cols, summary = summarize(header, rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md = out_dir / f"{name}.md"
    svg = out_dir / f"{name}.svg"
    md.write_text(markdown_table(group_cols, summary), encoding="utf-8")
    svg.write_text(svg_plot(group_cols, summary), encoding="utf-8")
    return md, svg
