"""Registration success rate as the share of corrupted correspondences grows.

    python scripts/ransac_sweep.py --seeds 50 --fractions 0.1,0.3,0.5,0.7
"""
import argparse
import time

import numpy as np

from instraj.config import RegisterParams
from instraj.geometry import Pose, so3_exp
from instraj.ingest import InstanceObservation
from instraj.register import CanonicalInstance, RegistrationFailure, ransac_register
from instraj.synthgen import random_descriptors, sample_box_surface


def pair(seed: int, corrupt: float, sigma: float):
    rng = np.random.default_rng(seed)
    pts = sample_box_surface((4.5, 1.9, 1.5), 40.0, rng)
    desc = random_descriptors(len(pts), 32, rng)
    T = Pose(so3_exp([0, 0, rng.uniform(-np.pi, np.pi)]), rng.uniform(-30, 30, 3))
    keep = np.arctan2(pts[:, 1], pts[:, 0]) % (2 * np.pi) < rng.uniform(1.2, 2.0) * np.pi
    tdesc = desc[keep].copy()
    bad = rng.choice(len(tdesc), int(round(corrupt * len(tdesc))), replace=False)
    tdesc[bad] = tdesc[np.roll(bad, 1)]
    tgt = T.apply(pts[keep]) + rng.normal(0, sigma, (keep.sum(), 3))
    src = CanonicalInstance(1, pts, desc, 0.0, Pose.identity(), np.zeros(3))
    return src, InstanceObservation(1, 0.1, tgt, tdesc), T


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--fractions", default="0.1,0.3,0.5,0.7")
    ap.add_argument("--sigma", type=float, default=0.01)
    ap.add_argument("--iterations", type=int, default=RegisterParams().iterations)
    args = ap.parse_args()

    params = RegisterParams(iterations=args.iterations)
    print(f"{'corrupt':>8} {'success':>8} {'median t err':>13} {'time/pair':>10}")
    for frac in (float(f) for f in args.fractions.split(",")):
        ok, errs = 0, []
        start = time.perf_counter()
        for seed in range(args.seeds):
            src, dst, T = pair(seed, frac, args.sigma)
            try:
                est, _ = ransac_register(src, dst, params, seed=seed)
            except RegistrationFailure:
                continue
            e = np.linalg.norm(est.translation - T.translation)
            errs.append(e)
            ok += e < 0.02
        per = (time.perf_counter() - start) / args.seeds
        med = np.median(errs) if errs else float("nan")
        print(f"{frac:8.2f} {ok:5d}/{args.seeds:<3d} {med:12.4f}m {1000 * per:8.0f}ms")


if __name__ == "__main__":
    main()
