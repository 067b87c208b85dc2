"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import itertools
from collections import deque

import mpmath as mp
import numpy as np


def brute_force_dbscan(points, eps, min_pts):
    """Textbook DBSCAN: O(n^2) distances, BFS expansion in index order."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    nbrs = [np.flatnonzero(d2[i] <= eps * eps) for i in range(n)]
    core = [len(nb) >= min_pts for nb in nbrs]
    labels = [None] * n
    cluster = -1
    for i in range(n):
        if labels[i] is not None or not core[i]:
            continue
        cluster += 1
        labels[i] = cluster
        queue = deque(nbrs[i])
        while queue:
            j = queue.popleft()
            if labels[j] is None:
                labels[j] = cluster
                if core[j]:
                    queue.extend(nbrs[j])
    return np.array([-1 if lab is None else lab for lab in labels])


def same_partition(a, b) -> bool:
    """Equal labelings up to a bijective renaming (noise must stay noise)."""
    a, b = np.asarray(a), np.asarray(b)
    if not np.array_equal(a == -1, b == -1):
        return False
    fwd, back = {}, {}
    for x, y in zip(a[a != -1], b[b != -1]):
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


def brute_force_erosion(bitmap, radius):
    bitmap = np.asarray(bitmap, dtype=bool)
    h, w = bitmap.shape
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1) if dx * dx + dy * dy <= radius * radius]
    out = np.zeros_like(bitmap)
    for y in range(h):
        for x in range(w):
            out[y, x] = all(0 <= y + dy < h and 0 <= x + dx < w and bitmap[y + dy, x + dx] for dy, dx in offs)
    return out


def brute_force_assignment(gt, pred, threshold):
    """Enumerate all partial one-to-one matchings; max matches, then min total distance."""
    gt, pred = np.asarray(gt, float), np.asarray(pred, float)
    best = (0, 0.0, ())
    n, m = len(gt), len(pred)
    for k in range(min(n, m), 0, -1):
        for gi in itertools.combinations(range(n), k):
            for pj in itertools.permutations(range(m), k):
                d = [np.linalg.norm(gt[a] - pred[b]) for a, b in zip(gi, pj)]
                if max(d) > threshold:
                    continue
                cand = (k, -sum(d), tuple(zip(gi, pj)))
                if cand[:2] > best[:2]:
                    best = cand
        if best[0]:
            break
    return best[0], -best[1], dict(best[2])


def ct_closed_form(v, kappa, dt, dps=50):
    """Arbitrary-precision (theta, dx, dy) of the CT increment."""
    with mp.workdps(dps):
        v, kappa, dt = mp.mpf(v), mp.mpf(kappa), mp.mpf(dt)
        th = kappa * v * dt
        return th, mp.sin(th) / kappa, (1 - mp.cos(th)) / kappa


def rotation_angle(R) -> float:
    c = np.clip((np.trace(R) - 1) / 2, -1, 1)
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2
    return float(np.arctan2(s, c))
