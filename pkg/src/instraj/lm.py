"""Levenberg-Marquardt for problems on product manifolds.

A problem exposes ``cost(x)``, ``linearize(x) -> (J, r)`` and
``retract(x, delta)``. ``J`` and ``r`` are already whitened and robustly
reweighted so that the local model is ``0.5 * ||J @ delta + r||^2``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve


class SingularSystem(np.linalg.LinAlgError):
    """Normal equations stay singular even under heavy damping."""


@dataclass
class LMInfo:
    iterations: int = 0
    accepted: int = 0
    costs: list[float] = field(default_factory=list)
    final_lambda: float = 0.0


def _solve(H, g, lam):
    n = H.shape[0]
    if sp.issparse(H):
        A = (H + lam * sp.identity(n, format="csc")).tocsc()
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                delta = spsolve(A, -g)
            except (MatrixRankWarning, RuntimeError):
                return None
    else:
        try:
            delta = np.linalg.solve(H + lam * np.eye(n), -g)
        except np.linalg.LinAlgError:
            return None
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    return delta if np.all(np.isfinite(delta)) else None


def levenberg_marquardt(
    problem,
    x0,
    max_iters: int = 10,
    lambda_init: float = 1e-4,
    rel_tol: float = 1e-6,
    lambda_max: float = 1e10,
    grad_tol: float = 1e-12,
):
    """Minimize ``problem.cost`` from ``x0``; returns ``(x, cost, info)``.

    Damping is ``lambda * I``: divided by 10 after an accepted step,
    multiplied by 10 after a rejected one. Accepted steps never raise the cost.
    """
    x = x0
    cost = problem.cost(x)
    info = LMInfo(costs=[cost])
    lam = lambda_init
    for _ in range(max_iters):
        info.iterations += 1
        J, r = problem.linearize(x)
        H = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) <= grad_tol * (1.0 + cost):
            break
        accepted = False
        while lam <= lambda_max:
            delta = _solve(H, g, lam)
            if delta is None:
                if lam >= 1e6:
                    raise SingularSystem(f"normal equations singular at lambda={lam:g}")
                lam *= 10.0
                continue
            x_new = problem.retract(x, delta)
            new_cost = problem.cost(x_new)
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not accepted:
            break
        info.accepted += 1
        decrease = cost - new_cost
        x, cost = x_new, new_cost
        info.costs.append(cost)
        if decrease <= rel_tol * max(cost + decrease, 1e-300):
            break
    info.final_lambda = lam
    return x, cost, info
