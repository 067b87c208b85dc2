"""CLEAR-MOT evaluation of predicted tracks against ground truth."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 3.0, 5.0, 10.0)


class EmptyGroundTruth(ValueError):
    """No ground-truth objects: MOTA is undefined."""


class FrameMismatch(ValueError):
    """Ground-truth and prediction frames are not time-aligned."""


@dataclass(eq=False)
class TrackFrame:
    timestamp: float
    ids: list[int]
    positions: np.ndarray  # (K, 3)

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError(f"duplicate track id in frame t={self.timestamp}")
        if len(self.ids) != len(self.positions):
            raise ValueError("ids and positions differ in length")


@dataclass
class ThresholdResult:
    threshold: float
    frames: int = 0
    objects: int = 0
    predictions: int = 0
    matches: int = 0
    switches: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    mota: float = math.nan
    motp: float = math.nan
    recall: float = math.nan
    precision: float = math.nan
    empty_ground_truth: bool = False


@dataclass
class TrackingReport:
    results: list[ThresholdResult] = field(default_factory=list)

    def at(self, threshold: float) -> ThresholdResult:
        for r in self.results:
            if math.isclose(r.threshold, threshold):
                return r
        raise KeyError(threshold)

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.results]


def mota(objects: int, false_positives: int, false_negatives: int, switches: int) -> float:
    if objects <= 0:
        raise EmptyGroundTruth("MOTA is undefined without ground-truth objects")
    return 1.0 - (false_positives + false_negatives + switches) / objects


def hungarian_match(gt: np.ndarray, pred: np.ndarray, threshold: float) -> list[tuple[int, int, float]]:
    """Minimum-distance one-to-one assignment; pairs farther than ``threshold`` are forbidden.

    Returns ``(gt_index, pred_index, distance)`` triples sorted by gt index.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    pred = np.asarray(pred, dtype=float).reshape(-1, 3)
    if len(gt) == 0 or len(pred) == 0:
        return []
    dist = np.linalg.norm(gt[:, None, :] - pred[None, :, :], axis=-1)
    allowed = dist <= threshold
    # forbidden cost larger than any feasible total, so match count is maximized first
    big = 1.0 + threshold * (min(len(gt), len(pred)) + 1)
    cost = np.where(allowed, dist, big)
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c), float(dist[r, c])) for r, c in zip(rows, cols) if allowed[r, c]]


def _check_aligned(gt_frames: list[TrackFrame], pred_frames: list[TrackFrame]) -> None:
    gt_t = [f.timestamp for f in gt_frames]
    pr_t = [f.timestamp for f in pred_frames]
    if len(gt_t) != len(pr_t) or not np.allclose(gt_t, pr_t, rtol=0, atol=1e-9):
        raise FrameMismatch("ground-truth and prediction timestamps differ")


def evaluate_threshold(gt_frames: list[TrackFrame], pred_frames: list[TrackFrame], threshold: float) -> ThresholdResult:
    res = ThresholdResult(threshold=float(threshold), frames=len(gt_frames))
    partner: dict[int, int] = {}  # gt id -> pred id of its latest match
    total_dist = 0.0
    for g, p in zip(gt_frames, pred_frames):
        res.objects += len(g.ids)
        res.predictions += len(p.ids)
        pidx = {pid: j for j, pid in enumerate(p.ids)}
        matched_g, matched_p = set(), set()
        pairs = []
        # keep last frame's correspondences while they stay within the threshold
        for i, gid in enumerate(g.ids):
            pid = partner.get(gid)
            if pid is None or pid not in pidx:
                continue
            j = pidx[pid]
            d = float(np.linalg.norm(g.positions[i] - p.positions[j]))
            if d <= threshold and j not in matched_p:
                pairs.append((i, j, d))
                matched_g.add(i)
                matched_p.add(j)
        gi = [i for i in range(len(g.ids)) if i not in matched_g]
        pj = [j for j in range(len(p.ids)) if j not in matched_p]
        for a, b, d in hungarian_match(g.positions[gi], p.positions[pj], threshold):
            pairs.append((gi[a], pj[b], d))
        for i, j, d in pairs:
            gid, pid = g.ids[i], p.ids[j]
            if gid in partner and partner[gid] != pid:
                res.switches += 1
            partner[gid] = pid
            total_dist += d
        res.matches += len(pairs)
    res.false_negatives = res.objects - res.matches
    res.false_positives = res.predictions - res.matches
    if res.objects == 0:
        res.empty_ground_truth = True
    else:
        res.mota = mota(res.objects, res.false_positives, res.false_negatives, res.switches)
        res.recall = res.matches / res.objects
    if res.matches:
        res.motp = total_dist / res.matches
    if res.predictions:
        res.precision = res.matches / res.predictions
    return res


def evaluate(
    gt_frames: list[TrackFrame],
    pred_frames: list[TrackFrame],
    thresholds=DEFAULT_THRESHOLDS,
) -> TrackingReport:
    """CLEAR-MOT counts and scores at every distance threshold."""
    _check_aligned(gt_frames, pred_frames)
    return TrackingReport([evaluate_threshold(gt_frames, pred_frames, t) for t in thresholds])
