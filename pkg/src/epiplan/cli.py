"""Command-line front end.

Every subcommand reads a RunConfig (``--config``, then ``--set key=value``
overrides) and writes its artifacts into ``--out DIR``. Exit status is 0 on
success, 1 on usage errors and 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import io, pipeline
from .config import RunConfig
from .encoder import EncoderParams
from .memory import rebuild


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.environ.get("EPIPLAN_CONFIG"),
                        help="key=value config file (default: $EPIPLAN_CONFIG)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--out", default="run", help="artifact directory (default: run)")

    parser = _Parser(prog="epiplan", description="Episodic-memory planner on a toy racing environment.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("track-gen", parents=[common], help="write track files")
    p.add_argument("--seed", type=int, action="append", help="track seed; default: train and eval seeds")
    sub.add_parser("phase1", parents=[common], help="straight-drive collection into a new database")
    sub.add_parser("phase2", parents=[common], help="unsafe-state exploration appended to the database")
    sub.add_parser("train", parents=[common],
                   help="planner training (runs phase1/phase2 first when no database exists)")
    p = sub.add_parser("eval", parents=[common], help="evaluate the trained planner on the held-out track")
    p.add_argument("--trace", action="store_true", help="also write decisions.jsonl")
    p = sub.add_parser("export-heatmap", parents=[common], help="latent grid heatmap as CSV and PGM")
    p.add_argument("--kind", choices=("population", "value"), default="population")
    p.add_argument("--name", help="file stem (default heatmap_<kind>)")
    p = sub.add_parser("inspect-state", parents=[common],
                       help="compare a stored state with the states at given distance ranks")
    p.add_argument("--episode", type=int, required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--rank", default="1,10,100", help="comma-separated 1-based ranks")
    p = sub.add_parser("baseline", parents=[common], help="random and centerline baselines")
    p.add_argument("--kind", choices=("random", "centerline", "both"), default="both")
    return parser


def _config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        return cfg.with_overrides(args.set)
    except (ValueError, TypeError, OSError) as exc:
        raise UsageError(f"epiplan: bad configuration: {exc}") from None


def _db_path(cfg: RunConfig, out: Path) -> Path:
    return out / cfg.db_file


def _load_encoder(cfg: RunConfig, out: Path) -> EncoderParams:
    path = out / cfg.encoder_file
    return EncoderParams.load(path) if path.exists() else pipeline.initial_encoder(cfg)


def _require_db(cfg: RunConfig, out: Path):
    path = _db_path(cfg, out)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run phase1 first")
    return io.load_db(path)


def _trained_grid(cfg: RunConfig, out: Path):
    db = _require_db(cfg, out)
    encoder = _load_encoder(cfg, out)
    return db, encoder, rebuild(db, encoder, cfg.g, cfg.k)


def cmd_track_gen(cfg, out, args):
    seeds = args.seed or [*cfg.train_seeds, cfg.eval_seed]
    for seed in seeds:
        path = out / f"track_{seed}.txt"
        pipeline.make_track(cfg, seed).save(path)
        print(path)


def cmd_phase1(cfg, out, args):
    envs = pipeline.make_train_envs(cfg)
    encoder = pipeline.initial_encoder(cfg)
    db = pipeline.phase1_collect(envs, cfg, encoder=encoder)
    io.save_db(db, _db_path(cfg, out))
    print(f"phase1: {len(db.episodes)} episodes, {len(db)} records")


def cmd_phase2(cfg, out, args):
    db = _require_db(cfg, out)
    envs = pipeline.make_train_envs(cfg)
    encoder, grid = pipeline.build_grid(db, _load_encoder(cfg, out), cfg)
    pipeline.phase2_explore(envs, grid, encoder, cfg, db)
    io.save_db(db, _db_path(cfg, out))
    encoder.save(out / cfg.encoder_file)
    print(f"phase2: {len(db.episodes)} episodes, {len(db)} records")


def cmd_train(cfg, out, args):
    if not _db_path(cfg, out).exists():
        cmd_phase1(cfg, out, args)
        cmd_phase2(cfg, out, args)
    db = _require_db(cfg, out)
    envs = pipeline.make_train_envs(cfg)
    encoder, grid = pipeline.build_grid(db, _load_encoder(cfg, out), cfg)
    io.export_heatmap(grid, out, "population", "population_before")
    result = pipeline.phase3_train(envs, db, encoder, grid, cfg)
    io.save_db(db, _db_path(cfg, out))
    result.encoder.save(out / cfg.encoder_file)
    io.export_heatmap(result.grid, out, "population", "population_after")
    io.write_curve(result.curve, out / "curve.csv")
    print(f"train: {len(result.curve)} episodes, {len(db)} records, "
          f"final success {result.curve[-1][1] if result.curve else 0.0:.1f}%")


def cmd_eval(cfg, out, args):
    db, encoder, grid = _trained_grid(cfg, out)
    decisions = [] if args.trace else None
    metrics = pipeline.evaluate(pipeline.make_eval_env(cfg), grid, encoder, cfg, decisions=decisions)
    metrics.training_interactions = len(db)
    io.write_metrics([("planner", metrics)], out / "metrics.txt")
    if decisions is not None:
        io.write_decisions(decisions, out / "decisions.jsonl")
    print(metrics.row("planner"))


def cmd_export_heatmap(cfg, out, args):
    _, _, grid = _trained_grid(cfg, out)
    for path in io.export_heatmap(grid, out, args.kind, args.name):
        print(path)


def cmd_inspect_state(cfg, out, args):
    try:
        ranks = [int(r) for r in args.rank.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"epiplan: --rank expects comma-separated integers, got {args.rank!r}") from None
    db, _, grid = _trained_grid(cfg, out)
    head, entries = io.inspect_state(db, grid, args.episode, args.step, ranks, cfg.p)
    text = io.format_inspection(head, entries)
    path = out / f"inspect_e{args.episode}_s{args.step}.txt"
    io._atomic_write_text(path, text)
    sys.stdout.write(text)


def cmd_baseline(cfg, out, args):
    rows = []
    if args.kind in ("random", "both"):
        rows.append(("random", pipeline.baseline_random(pipeline.make_eval_env(cfg), cfg.baseline_seed)))
    if args.kind in ("centerline", "both"):
        rows.append(("centerline", pipeline.baseline_centerline(pipeline.make_eval_env(cfg), cfg.baseline_speed)))
    io.write_metrics(rows, out / f"metrics_baseline_{args.kind}.txt")
    for label, m in rows:
        print(m.row(label))


COMMANDS = {
    "track-gen": cmd_track_gen,
    "phase1": cmd_phase1,
    "phase2": cmd_phase2,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-heatmap": cmd_export_heatmap,
    "inspect-state": cmd_inspect_state,
    "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.cfg")
        COMMANDS[args.command](cfg, out, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"epiplan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
