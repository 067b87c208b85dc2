"""Command-line front end.

Exit codes: 0 success, 1 I/O or data error, 2 configuration error.
Log verbosity comes from ``INSTRAJ_LOG_LEVEL`` (default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import fileio
from .config import ConfigError, PipelineConfig
from .fileio import DataError

log = logging.getLogger("instraj")

EXIT_OK, EXIT_DATA, EXIT_CONFIG = 0, 1, 2


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like section.field=value")
        out[key.strip()] = value.strip()
    return out


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        doc = yaml.safe_load(Path(args.config).read_text()) or {}
        flat = {}
        for section, values in doc.items():
            if isinstance(values, dict):
                flat.update({f"{section}.{k}": v for k, v in values.items()})
            else:
                flat[section] = values
        cfg = cfg.with_overrides(flat)
    over = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        over["seed"] = str(args.seed)
    return cfg.with_overrides(over)


def cmd_generate(args) -> int:
    from .synthgen import ScenarioConfig, generate, to_sequence

    try:
        doc = yaml.safe_load(Path(args.config).read_text()) or {}
    except OSError as exc:
        raise DataError(f"cannot read {args.config}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML/JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a mapping")
    cfg = ScenarioConfig.from_dict(doc)
    scenario = generate(cfg)
    out = Path(args.out_dir)
    fileio.save_sequence(to_sequence(scenario), out)
    fileio.write_json(out / "ground_truth.json", fileio.truth_to_dict(scenario.truth))
    fileio.write_json(out / "gt_tracks.json", fileio.tracks_to_dict(fileio.truth_tracks(scenario.truth)))
    print(f"wrote {cfg.frames} frames, {len(cfg.objects)} objects to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import EventLog, run_pipeline, write_outputs

    cfg = _load_config(args)
    seq = fileio.load_sequence(args.seq_dir)
    events = EventLog()
    results = run_pipeline(seq, cfg, workers=args.workers, events=events)
    summary = write_outputs(results, seq.times, args.out_dir, events, plot=not args.no_plot)
    fileio.write_json(Path(args.out_dir) / "config.json", cfg.to_dict())
    print(
        f"{summary['instance_count']} instances, {summary['static_count']} static, "
        f"{summary['rejected_total']} rejected measurements, failed: {summary['failed']}"
    )
    return EXIT_OK


def cmd_register(args) -> int:
    from .pipeline import EventLog, lift_sequence
    from .register import build_trajectory

    cfg = _load_config(args)
    seq = fileio.load_sequence(args.seq_dir)
    events = EventLog()
    out = Path(args.out_dir)
    for iid, obs in lift_sequence(seq, cfg, events).items():
        traj = build_trajectory(obs, cfg.register, seed=cfg.seed)
        events("registered", instance=iid, measurements=len(traj.poses), failures=len(traj.failures))
        fileio.write_json(out / f"instance_{iid:03d}.json", fileio.measured_to_dict(traj))
    out.mkdir(parents=True, exist_ok=True)
    events.write(out / "events.jsonl")
    return EXIT_OK


def _infer_grid(stamps: list[float]) -> np.ndarray:
    stamps = np.asarray(sorted(stamps), dtype=float)
    if len(stamps) < 2:
        return stamps
    dt = float(np.min(np.diff(stamps)))
    n = int(round((stamps[-1] - stamps[0]) / dt)) + 1
    grid = stamps[0] + dt * np.arange(n)
    # snap to the exact measurement stamps
    idx = np.round((stamps - stamps[0]) / dt).astype(int)
    grid[idx] = stamps
    return grid


def cmd_smooth(args) -> int:
    from .ctsmooth import AllMeasurementsRejected, smooth

    cfg = _load_config(args)
    seq_times = fileio.load_sequence(args.sequence).times if args.sequence else None
    out = Path(args.out_dir)
    status = EXIT_OK
    for path in args.measured:
        traj = fileio.load_measured(path)
        stamps = traj.timestamps
        if seq_times is not None:
            grid = seq_times[(seq_times >= stamps[0] - 1e-9) & (seq_times <= stamps[-1] + 1e-9)]
        else:
            grid = _infer_grid(stamps)
        try:
            sm = smooth(traj, grid, cfg.smooth)
        except AllMeasurementsRejected as exc:
            print(f"instance {traj.instance_id}: {exc}", file=sys.stderr)
            continue
        fileio.write_json(out / f"instance_{traj.instance_id:03d}.json", fileio.smoothed_to_dict(sm))
    return status


def cmd_eval(args) -> int:
    from .moteval import FrameMismatch, evaluate

    cfg = _load_config(args)
    thresholds = cfg.eval.thresholds
    if args.thresholds:
        thresholds = tuple(float(x) for x in args.thresholds.split(","))
        if not thresholds or any(t <= 0 for t in thresholds):
            raise ConfigError("thresholds", "must be positive numbers")
    gt = fileio.load_tracks(args.gt)
    pred = fileio.load_tracks(args.pred)
    try:
        report = evaluate(gt, pred, thresholds)
    except FrameMismatch as exc:
        raise DataError(str(exc)) from exc
    fileio.write_json(args.out, fileio.report_to_dict(report))
    print(fileio.report_table(report))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_trajectories
    from .synthgen import GroundTruth, ObjectTruth

    smoothed = [fileio.load_smoothed(p) for p in args.smoothed]
    truth = None
    if args.gt:
        doc = fileio.read_json(args.gt)
        if doc.get("format") != fileio.TRUTH_FORMAT:
            raise DataError(f"{args.gt}: expected format {fileio.TRUTH_FORMAT!r}")
        objs = [
            ObjectTruth(o["id"], o["label"], [fileio.pose_from_record(r) for r in o["records"]],
                        np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 0)))
            for o in doc["objects"]
        ]
        truth = GroundTruth(np.asarray(doc["times"]), objs)
    plot_trajectories(smoothed, args.out, ground_truth=truth)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instraj", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML/JSON file with pipeline overrides by section")
        p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE", help="override one parameter")
        p.add_argument("--seed", type=int)
        return p

    p = sub.add_parser("generate", help="write a synthetic sequence")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_generate)

    p = with_config(sub.add_parser("run", help="lift, register and smooth every instance"))
    p.add_argument("seq_dir")
    p.add_argument("out_dir")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("register", help="lift and register; write measured trajectories"))
    p.add_argument("seq_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_register)

    p = with_config(sub.add_parser("smooth", help="smooth measured trajectory files"))
    p.add_argument("out_dir")
    p.add_argument("measured", nargs="+")
    p.add_argument("--sequence", help="sequence dir providing the time grid")
    p.set_defaults(func=cmd_smooth)

    p = with_config(sub.add_parser("eval", help="CLEAR-MOT report of predicted vs ground-truth tracks"))
    p.add_argument("gt")
    p.add_argument("pred")
    p.add_argument("out")
    p.add_argument("--thresholds", help="comma-separated distances in meters")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="plot smoothed trajectories")
    p.add_argument("smoothed", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="ground_truth.json from generate")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("INSTRAJ_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
