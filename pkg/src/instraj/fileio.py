"""On-disk formats.

Everything is UTF-8 JSON with sorted keys and shortest round-trip float
repr, so files are byte-reproducible and reload to identical values.
Poses are written as a unit quaternion ``q = [w, x, y, z]`` (``w >= 0``)
and a translation ``p = [x, y, z]``.

Layout of a sequence directory::

    sequence.json          camera, dt, frame file list
    frames/000000.json     timestamp, lidar points/descriptors/origin, RLE masks
    ground_truth.json      full synthetic ground truth (optional)
    gt_tracks.json         ground truth in the track format (optional)
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose
from .ingest import CameraModel, InstanceMask, LidarFrame
from .moteval import TrackFrame, TrackingReport
from .register import MeasuredTrajectory

SEQUENCE_FORMAT = "instraj-sequence/1"
TRACKS_FORMAT = "instraj-tracks/1"
MEASURED_FORMAT = "instraj-measured/1"
SMOOTHED_FORMAT = "instraj-smoothed/1"
REPORT_FORMAT = "instraj-report/1"
TRUTH_FORMAT = "instraj-truth/1"

REPORT_COLUMNS = (
    "threshold", "frames", "objects", "predictions", "matches", "switches",
    "false_positives", "false_negatives", "mota", "motp", "recall", "precision",
)


class DataError(ValueError):
    """Input file is missing, unreadable or does not follow the expected schema."""


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return None if math.isnan(f) else f
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False) + "\n"


def write_json(path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")


def read_json(path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _expect(doc: Any, fmt: str, path) -> dict:
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        found = doc.get("format") if isinstance(doc, dict) else type(doc).__name__
        raise DataError(f"{path}: expected format {fmt!r}, found {found!r}")
    return doc


# ---------------------------------------------------------------- poses


def pose_to_record(pose: Pose) -> dict:
    x, y, z, w = Rotation.from_matrix(pose.rotation).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return {"q": q.tolist(), "p": pose.translation.tolist()}


def pose_from_record(rec: dict) -> Pose:
    w, x, y, z = rec["q"]
    return Pose(Rotation.from_quat([x, y, z, w]).as_matrix(), rec["p"])


# ---------------------------------------------------------------- masks


def rle_encode(bitmap: np.ndarray) -> dict:
    """Row-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(bitmap, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(bitmap.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise DataError("RLE counts do not cover the mask")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


# ---------------------------------------------------------------- sequences


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "intrinsics": cam.intrinsics.tolist(),
        "extrinsic": cam.extrinsic.as_matrix()[:3].tolist(),
        "width": cam.width,
        "height": cam.height,
    }


def camera_from_dict(d: dict) -> CameraModel:
    M = np.vstack([np.asarray(d["extrinsic"], dtype=float), [0, 0, 0, 1]])
    return CameraModel(np.asarray(d["intrinsics"], dtype=float), Pose.from_matrix(M), int(d["width"]), int(d["height"]))


def save_sequence(seq, out_dir) -> None:
    out = Path(out_dir)
    names = []
    for k, frame in enumerate(seq.frames):
        name = f"frames/{k:06d}.json"
        names.append(name)
        lidar = frame.lidar
        write_json(
            out / name,
            {
                "timestamp": lidar.timestamp,
                "lidar": {
                    "origin": lidar.origin,
                    "points": lidar.points,
                    "descriptors": lidar.descriptors,
                },
                "masks": [
                    {"id": m.instance_id, "label": m.label, "rle": rle_encode(m.bitmap)}
                    for m in sorted(frame.masks, key=lambda m: m.instance_id)
                ],
            },
        )
    write_json(
        out / "sequence.json",
        {"format": SEQUENCE_FORMAT, "camera": camera_to_dict(seq.camera), "dt": seq.dt, "frames": names},
    )


def load_sequence(seq_dir):
    from .synthgen import Sequence, SequenceFrame

    root = Path(seq_dir)
    if not (root / "sequence.json").is_file():
        raise DataError(f"{root}: no sequence.json")
    meta = _expect(read_json(root / "sequence.json"), SEQUENCE_FORMAT, root / "sequence.json")
    try:
        cam = camera_from_dict(meta["camera"])
        frames = []
        for name in meta["frames"]:
            doc = read_json(root / name)
            lid = doc["lidar"]
            t = float(doc["timestamp"])
            pts = np.asarray(lid["points"], dtype=float).reshape(-1, 3)
            desc = np.asarray(lid["descriptors"], dtype=float).reshape(len(pts), -1)
            lidar = LidarFrame(pts, t, desc, np.asarray(lid["origin"], dtype=float))
            masks = [InstanceMask(int(m["id"]), m["label"], rle_decode(m["rle"]), t) for m in doc["masks"]]
            frames.append(SequenceFrame(lidar, masks))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{root}: malformed sequence: {exc}") from exc
    if not frames:
        raise DataError(f"{root}: sequence has no frames")
    return Sequence(cam, float(meta["dt"]), frames)


# ---------------------------------------------------------------- ground truth and tracks


def truth_to_dict(truth) -> dict:
    return {
        "format": TRUTH_FORMAT,
        "times": truth.times,
        "objects": [
            {
                "id": o.instance_id,
                "label": o.label,
                "records": [
                    {"t": float(t), "v": float(v), "kappa": float(k)} | pose_to_record(p)
                    for t, p, v, k in zip(truth.times, o.poses, o.speeds, o.curvatures)
                ],
            }
            for o in truth.objects
        ],
    }


def truth_tracks(truth) -> list[TrackFrame]:
    return [
        TrackFrame(float(t), [o.instance_id for o in truth.objects], [o.poses[k].translation for o in truth.objects])
        for k, t in enumerate(truth.times)
    ]


def tracks_to_dict(frames: list[TrackFrame]) -> dict:
    return {
        "format": TRACKS_FORMAT,
        "frames": [
            {"t": f.timestamp, "entries": [{"id": i, "p": p} for i, p in zip(f.ids, f.positions)]}
            for f in frames
        ],
    }


def load_tracks(path) -> list[TrackFrame]:
    doc = _expect(read_json(path), TRACKS_FORMAT, path)
    try:
        return [
            TrackFrame(float(f["t"]), [e["id"] for e in f["entries"]], [e["p"] for e in f["entries"]])
            for f in doc["frames"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed tracks: {exc}") from exc


# ---------------------------------------------------------------- trajectories


def measured_to_dict(traj: MeasuredTrajectory) -> dict:
    return {
        "format": MEASURED_FORMAT,
        "instance_id": traj.instance_id,
        "label": traj.label,
        "t_init": traj.t_init,
        "canonical_point_count": len(traj.canonical_points),
        "records": [
            {"t": t, "fitness": traj.fitness.get(t, math.nan)} | pose_to_record(traj.poses[t])
            for t in traj.timestamps
        ],
        "failures": [{"t": t, "reason": r} for t, r in sorted(traj.failures.items())],
    }


def load_measured(path) -> MeasuredTrajectory:
    doc = _expect(read_json(path), MEASURED_FORMAT, path)
    try:
        poses = {float(r["t"]): pose_from_record(r) for r in doc["records"]}
        fit = {float(r["t"]): (math.nan if r["fitness"] is None else float(r["fitness"])) for r in doc["records"]}
        return MeasuredTrajectory(
            instance_id=int(doc["instance_id"]),
            poses=poses,
            fitness=fit,
            canonical_points=np.zeros((0, 3)),
            canonical_descriptors=np.zeros((0, 0)),
            t_init=float(doc["t_init"]),
            failures={float(f["t"]): f["reason"] for f in doc.get("failures", [])},
            label=doc.get("label", ""),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed measured trajectory: {exc}") from exc


def smoothed_to_dict(traj) -> dict:
    st = traj.state
    q_shared = pose_to_record(Pose(st.shared_rotation, np.zeros(3)))["q"]
    return {
        "format": SMOOTHED_FORMAT,
        "instance_id": traj.instance_id,
        "label": traj.label,
        "is_static": traj.is_static,
        "final_cost": traj.cost,
        "shared_rotation": q_shared,
        "records": [
            {
                "t": float(t),
                "v": float(st.speeds[i]),
                "kappa": float(st.curvatures[i]),
                "measured": bool(float(t) in traj.measured),
                "rejected": bool(float(t) in traj.rejected),
            }
            | pose_to_record(st.pose(i))
            for i, t in enumerate(traj.times)
        ],
    }


def load_smoothed(path):
    from .ctsmooth import SmoothedTrajectory, SmootherState

    doc = _expect(read_json(path), SMOOTHED_FORMAT, path)
    try:
        recs = doc["records"]
        poses = [pose_from_record(r) for r in recs]
        w, x, y, z = doc["shared_rotation"]
        state = SmootherState(
            np.array([p.rotation for p in poses]).reshape(-1, 3, 3),
            np.array([p.translation for p in poses]).reshape(-1, 3),
            np.array([r["v"] for r in recs], dtype=float),
            np.array([r["kappa"] for r in recs], dtype=float),
            Rotation.from_quat([x, y, z, w]).as_matrix(),
        )
        return SmoothedTrajectory(
            instance_id=int(doc["instance_id"]),
            times=np.array([r["t"] for r in recs], dtype=float),
            state=state,
            measured={float(r["t"]) for r in recs if r["measured"]},
            rejected={float(r["t"]) for r in recs if r["rejected"]},
            is_static=bool(doc["is_static"]),
            cost=float(doc["final_cost"]),
            label=doc.get("label", ""),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed smoothed trajectory: {exc}") from exc


def smoothed_tracks(trajs, times) -> list[TrackFrame]:
    """Track frames on the sequence grid; instances appear only within their time span."""
    frames = []
    for t in times:
        ids, pos = [], []
        for tr in sorted(trajs, key=lambda s: s.instance_id):
            hit = np.flatnonzero(np.abs(tr.times - t) < 1e-9)
            if len(hit):
                ids.append(tr.instance_id)
                pos.append(tr.state.translations[hit[0]])
        frames.append(TrackFrame(float(t), ids, np.array(pos).reshape(-1, 3)))
    return frames


def report_to_dict(report: TrackingReport) -> dict:
    return {
        "format": REPORT_FORMAT,
        "columns": list(REPORT_COLUMNS),
        "rows": [
            {c: getattr(r, c) for c in REPORT_COLUMNS} | {"empty_ground_truth": r.empty_ground_truth}
            for r in report.results
        ],
    }


def report_table(report: TrackingReport) -> str:
    """Plain-text table in the column order of the report file."""
    head = ["Dist [m]", "Frames", "Objects", "Preds", "Matches", "Switches", "FP", "FN", "MOTA", "MOTP", "Recall", "Prec"]
    lines = ["  ".join(f"{h:>8}" for h in head)]
    for r in report.results:
        vals = [getattr(r, c) for c in REPORT_COLUMNS]
        cells = [f"{v:8.2f}" if isinstance(v, float) else f"{v:8d}" for v in vals]
        lines.append("  ".join(cells))
    return "\n".join(lines)
