"""Stage orchestration: lift -> cluster -> register -> smooth."""
from __future__ import annotations

import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .config import PipelineConfig
from .ctsmooth import AllMeasurementsRejected, SmoothedTrajectory, SmootherState, smooth
from .ingest import AllNoise, InstanceObservation, keep_largest_cluster, lift_instance_points
from .register import MeasuredTrajectory, build_trajectory

log = logging.getLogger(__name__)


class EventLog:
    """Structured pipeline events, one JSON record per line, no wall-clock fields."""

    def __init__(self):
        self.records: list[dict] = []

    def __call__(self, event: str, **fields) -> None:
        rec = {"event": event, **fields}
        self.records.append(rec)
        log.info("%s %s", event, json.dumps(fileio._plain(fields), sort_keys=True))

    def write(self, path) -> None:
        Path(path).write_text("".join(fileio.dumps(r) for r in self.records), encoding="utf-8")


def lift_sequence(seq, config: PipelineConfig, events: EventLog | None = None) -> dict[int, list[InstanceObservation]]:
    """Per-instance observations after erosion, range gating and largest-cluster filtering."""
    p = config.ingest
    out: dict[int, list[InstanceObservation]] = defaultdict(list)
    for frame in seq.frames:
        for obs in lift_instance_points(frame.lidar, frame.masks, seq.camera, p.max_range, p.erosion_radius):
            try:
                kept = keep_largest_cluster(obs, p.dbscan_eps, p.dbscan_min_pts)
            except AllNoise:
                if events:
                    events("all_noise", instance=obs.instance_id, t=obs.timestamp, points=len(obs))
                continue
            out[obs.instance_id].append(kept)
    return dict(sorted(out.items()))


@dataclass
class InstanceResult:
    instance_id: int
    observations: int
    measured: MeasuredTrajectory
    smoothed: SmoothedTrajectory
    status: str  # "smoothed" | "static" | "raw"
    events: list[dict] = field(default_factory=list)


def _raw_smoothed(traj: MeasuredTrajectory) -> SmoothedTrajectory:
    stamps = traj.timestamps
    poses = [traj.poses[t] for t in stamps]
    state = SmootherState(
        np.array([p.rotation for p in poses]), np.array([p.translation for p in poses]),
        np.zeros(len(poses)), np.zeros(len(poses)), np.eye(3),
    )
    return SmoothedTrajectory(traj.instance_id, np.array(stamps), state, set(stamps), set(stamps), False, float("nan"), traj.label)


def process_instance(args) -> InstanceResult:
    """Register and smooth one instance; picklable entry point for worker pools."""
    obs, times, config = args
    ev = EventLog()
    iid = obs[0].instance_id
    traj = build_trajectory(obs, config.register, seed=config.seed)
    ev("registered", instance=iid, measurements=len(traj.poses), failures=len(traj.failures),
       canonical_points=len(traj.canonical_points))
    stamps = traj.timestamps
    grid = times[(times >= stamps[0] - 1e-9) & (times <= stamps[-1] + 1e-9)]
    try:
        sm = smooth(traj, grid, config.smooth)
        status = "static" if sm.is_static else "smoothed"
        ev("smoothed", instance=iid, status=status, rejected=sorted(sm.rejected), cost=sm.cost)
    except AllMeasurementsRejected:
        sm = _raw_smoothed(traj)
        status = "raw"
        ev("all_rejected", instance=iid)
    return InstanceResult(iid, len(obs), traj, sm, status, ev.records)


def run_pipeline(seq, config: PipelineConfig, workers: int = 1, events: EventLog | None = None) -> list[InstanceResult]:
    events = events if events is not None else EventLog()
    lifted = lift_sequence(seq, config, events)
    for iid, obs in lifted.items():
        events("lifted", instance=iid, frames=len(obs), points=int(sum(len(o) for o in obs)))
    times = seq.times
    jobs = [(obs, times, config) for obs in lifted.values()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(process_instance, jobs))
    else:
        results = [process_instance(j) for j in jobs]
    for r in results:
        events.records.extend(r.events)
    return results


def summarize(results: list[InstanceResult]) -> dict:
    return {
        "instance_count": len(results),
        "static_count": sum(r.status == "static" for r in results),
        "rejected_total": sum(len(r.smoothed.rejected) for r in results if r.status != "raw"),
        "failed": [r.instance_id for r in results if r.status == "raw"],
        "instances": [
            {
                "id": r.instance_id,
                "label": r.measured.label,
                "observations": r.observations,
                "measurements": len(r.measured.poses),
                "registration_failures": {str(t): why for t, why in sorted(r.measured.failures.items())},
                "rejected": sorted(r.smoothed.rejected) if r.status != "raw" else [],
                "is_static": r.status == "static",
                "status": r.status,
            }
            for r in results
        ],
    }


def write_outputs(results: list[InstanceResult], times, out_dir, events: EventLog, plot: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        fileio.write_json(out / "measured" / f"instance_{r.instance_id:03d}.json", fileio.measured_to_dict(r.measured))
        fileio.write_json(out / "smoothed" / f"instance_{r.instance_id:03d}.json", fileio.smoothed_to_dict(r.smoothed))
    tracks = fileio.smoothed_tracks([r.smoothed for r in results], times)
    fileio.write_json(out / "tracks.json", fileio.tracks_to_dict(tracks))
    summary = summarize(results)
    fileio.write_json(out / "summary.json", summary)
    events.write(out / "events.jsonl")
    if plot:
        from .plotting import plot_trajectories

        plot_trajectories([r.smoothed for r in results], out / "trajectories.png")
    return summary


def default_workers() -> int:
    return os.cpu_count() or 1
