"""Command-line entry point: ``tqd <subcommand>``.

Exit codes: 0 success, 2 configuration or schema error, 3 file I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .experiment import (
    GridError,
    SchemaError,
    emit_report,
    evaluate_checkpoint,
    load_grid,
    preset_names,
    run_ablation,
    run_experiment,
    train_model,
)
from .sim import make_dataset, write_scene_data

EXIT_CONFIG = 2
EXIT_IO = 3


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides({"training.seed": args.seed})
    return cfg


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out or os.environ.get("TQD_OUT_DIR") or "tqd_out")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args) / "data"
    splits = ("train", "eval") if args.split == "both" else (args.split,)
    for split in splits:
        if split == "train":
            scenes = make_dataset(cfg.scenario(), cfg["training.data_seed"], "train", cfg["training.n_train_scenes"])
        else:
            scenes = []
            for s in cfg["eval.seeds"]:
                scenes += make_dataset(cfg.scenario(), cfg["training.data_seed"], "eval", cfg["eval.n_eval_scenes"], s)
        for i, d in enumerate(scenes):
            write_scene_data(out / split, i, d)
        print(f"wrote {len(scenes)} {split} scenes to {out / split}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    train_model(cfg, out, args.data)
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    row = evaluate_checkpoint(ckpt, cfg, out)
    print(", ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    row = run_experiment(cfg, _out_dir(args), args.data)
    print(", ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_ablate(args) -> int:
    base = _load_config(args)
    out = _out_dir(args)
    for spec in args.grids:
        grid = load_grid(spec)
        if args.seeds:
            grid.seeds = [int(s) for s in args.seeds.split(",")]
        target = out / grid.name
        rows, skipped = run_ablation(grid, target, args.threads, base, args.data)
        for s in skipped:
            print(f"skipped invalid cell {s}", file=sys.stderr)
        emit_report([target / "ablation.csv"], target)
        print(f"{grid.name}: {len(rows)} rows -> {target / 'ablation.csv'}")
    return 0


def cmd_report(args) -> int:
    md, svg = emit_report([Path(p) for p in args.csv], _out_dir(args), args.name)
    print(f"wrote {md} and {svg}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # Flags are accepted before or after the subcommand; defaults live
        # only on the top-level parser so a subparser never overwrites them.
        flags = argparse.ArgumentParser(add_help=False)
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        flags.add_argument("--config", default=dflt(None), help="run configuration file (key = value lines)")
        flags.add_argument("--seed", type=int, default=dflt(None), help="override training.seed")
        flags.add_argument("--out", default=dflt(None), help="output directory (default: $TQD_OUT_DIR or ./tqd_out)")
        flags.add_argument("--threads", type=int, default=dflt(1), help="parallel grid cells")
        return flags

    common = global_flags(True)
    p = argparse.ArgumentParser(prog="tqd", description="Temporal query denoising experiments on a synthetic BEV world.",
                                parents=[global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write training/eval scenes and observations")
    g.add_argument("--split", choices=("train", "eval", "both"), default="both")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a tracker, write checkpoint and log")
    t.add_argument("--data", type=Path, help="read training scenes written by gen-data")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the eval scenes")
    e.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.bin)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", parents=[common], help="train then evaluate")
    r.add_argument("--data", type=Path)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", parents=[common], help=f"run ablation grids (files or presets: {', '.join(preset_names())})")
    a.add_argument("grids", nargs="+")
    a.add_argument("--seeds", help="override grid seeds, e.g. 0,1,2")
    a.add_argument("--data", type=Path)
    a.set_defaults(func=cmd_ablate)

    rep = sub.add_parser("report", parents=[common], help="Markdown + SVG summary of metric CSVs")
    rep.add_argument("csv", nargs="+")
    rep.add_argument("--name", default="report")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GridError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
