"""``pst`` command line: train, sweep, compare.

Exit codes: 0 success, 2 configuration or compatibility error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .analysis import export_run, pairwise_similarity, write_similarity_csv
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, load_config, save_config
from .importance import VARIANTS
from .trainer import NumericalAbort, RunReport, Trainer

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

REPORT_FILE = "report.json"
CHECKPOINT_FILE = "checkpoint.pst"
CONFIG_FILE = "config.toml"

# sweep axis -> (config field, value parser)
SWEEP_AXES = {
    "r1": ("r1", int),
    "r2": ("r2", int),
    "sparsity": ("target_p", float),
    "variant": ("variant", str),
}


def run_training(cfg: RunConfig, resume: str | None = None,
                 stop_after: int | None = None) -> RunReport:
    """Train per ``cfg`` and write config, report, checkpoint and CSVs to its output_dir."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / CONFIG_FILE)
    if resume:
        trainer = Trainer.from_checkpoint(Checkpoint.load(resume), cfg)
    else:
        trainer = Trainer(cfg)
    report = trainer.run(stop_after=stop_after)
    (out / REPORT_FILE).write_text(report.to_json())
    trainer.checkpoint().save(out / CHECKPOINT_FILE)
    export_run(report, out)
    return report


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    return cfg.replace(**overrides) if overrides else cfg


def cmd_train(args) -> int:
    try:
        cfg = _resolve(args)
        report = run_training(cfg, resume=args.resume, stop_after=args.stop_after)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{report.metric_name} = {report.final_metric:.6g} after {report.steps_completed} steps "
          f"({report.trainable_params} trainable params) -> {cfg.output_dir}")
    return EXIT_OK


def _run_cell(cfg_dict: dict) -> tuple[str, float | None, str]:
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        report = run_training(cfg)
    except NumericalAbort as exc:
        return "numerical abort", None, str(exc)
    except Exception as exc:  # a failed cell must not stop the sweep
        return "failed", None, f"{type(exc).__name__}: {exc}"
    return "ok", report.final_metric, report.metric_name


def _parse_axes(axes: list[str], values: list[str]) -> list[tuple[str, list]]:
    if len(axes) != len(values):
        raise ConfigError("sweep: every --axis needs a matching --values")
    grid = []
    for axis, raw in zip(axes, values):
        if axis not in SWEEP_AXES:
            raise ConfigError(f"axis: must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
        field, parse = SWEEP_AXES[axis]
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if axis == "variant" and items == ["all"]:
            items = list(VARIANTS)
        try:
            grid.append((axis, [parse(v) for v in items]))
        except ValueError:
            raise ConfigError(f"values: cannot parse {raw!r} for axis {axis}") from None
        if not grid[-1][1]:
            raise ConfigError(f"values: empty value list for axis {axis}")
    return grid


def cmd_sweep(args) -> int:
    try:
        base = _resolve(args)
        grid = _parse_axes(args.axis, args.values)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    # a cell whose values make an invalid config is reported, not fatal
    cells = []
    for combo in itertools.product(*[vals for _, vals in grid]):
        changes = {SWEEP_AXES[a][0]: v for (a, _), v in zip(grid, combo)}
        if "variant" in changes:
            changes["criterion"] = "pst"
        tag = "_".join(f"{a}={v}" for (a, _), v in zip(grid, combo))
        changes["output_dir"] = str(Path(base.output_dir) / tag)
        try:
            cells.append((combo, base.replace(**changes).to_dict(), None))
        except ConfigError as exc:
            cells.append((combo, None, ("config error", None, str(exc))))

    todo = [c for _, c, failed in cells if failed is None]
    workers = max(1, int(os.environ.get("PST_THREADS", "1") or 1))
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(todo))) as pool:
            done = iter(list(pool.map(_run_cell, todo)))
    else:
        done = iter([_run_cell(c) for c in todo])
    results = [failed if failed is not None else next(done) for _, _, failed in cells]

    out = Path(base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    axis_names = [a for a, _ in grid]
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(axis_names + ["metric", "value", "status"])
        for (combo, _, _), (status, value, info) in zip(cells, results):
            metric = info if status == "ok" else ""
            w.writerow(list(combo) + [metric, "" if value is None else repr(value), status])
            shown = f"{value:.6g}" if value is not None else f"FAILED ({status}: {info})"
            print("  ".join(f"{a}={v}" for a, v in zip(axis_names, combo)) + f"  ->  {shown}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.dirs) < 2:
        print("config error: compare needs at least two run directories", file=sys.stderr)
        return EXIT_CONFIG
    names = [Path(d).name or str(d) for d in args.dirs]
    if len(set(names)) < len(names):
        names = [str(d) for d in args.dirs]
    runs = {}
    for name, d in zip(names, args.dirs):
        path = Path(d) / REPORT_FILE
        try:
            runs[name] = RunReport.from_json(path.read_text())
        except OSError as exc:
            print(f"config error: cannot read {path}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        rows = pairwise_similarity(runs)
    except ValueError as exc:
        print(f"config error: incompatible runs: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_similarity_csv(rows, out / "similarity.csv")
    for r in rows:
        print(f"{r['pair']}  {r['layer']}  {r['similarity']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pst", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="flat TOML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--output-dir", default=None, help="override the config output_dir")

    t = sub.add_parser("train", help="run one training job")
    common(t)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, default=None,
                   help="stop once this many total steps are done (checkpoint is written)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a grid over one or more axes")
    common(s)
    s.add_argument("--axis", action="append", required=True, choices=sorted(SWEEP_AXES))
    s.add_argument("--values", action="append", required=True,
                   help="comma-separated values for the preceding --axis")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="mask similarity between finished runs")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--output-dir", default=None, help="where similarity.csv goes (default: .)")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
