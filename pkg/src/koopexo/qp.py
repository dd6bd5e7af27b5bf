"""Dense box-constrained convex QP: min 1/2 u'Hu + f'u  s.t.  lo <= u <= hi."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SolverFault(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"QP not converged after {iterations} iterations (KKT residual {residual:.3g})")
        self.residual = residual
        self.iterations = iterations


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


@dataclass
class QpSolution:
    u: np.ndarray
    iterations: int
    residual: float


def kkt_residual(H, f, u, lo, hi) -> float:
    """Largest violation of the box-QP optimality conditions at ``u``."""
    g = H @ u + f
    at_lo = u <= lo
    at_hi = u >= hi
    free = ~(at_lo | at_hi)
    viol = np.zeros_like(u)
    viol[free] = np.abs(g[free])
    # at a bound the gradient may only point out of the box
    viol[at_lo] = np.maximum(-g[at_lo], 0.0)
    viol[at_hi] = np.maximum(g[at_hi], 0.0)
    return float(viol.max()) if len(u) else 0.0


def solve_box_qp(qp: QpProblem, tol: float = 1e-6, max_iter: int = 200, u0=None) -> QpSolution:
    """Projected gradient with exact line search, polished by free-subspace Newton steps.

    Each iteration takes one projected-gradient step (exact minimiser along the
    projected direction), then fixes the variables sitting on a bound with the
    gradient pushing outward and solves the reduced system for the rest,
    stopping at the first bound hit.
    """
    H = np.asarray(qp.H, dtype=float)
    f = np.asarray(qp.f, dtype=float)
    lo = np.asarray(qp.lo, dtype=float)
    hi = np.asarray(qp.hi, dtype=float)
    u = np.zeros_like(f) if u0 is None else np.asarray(u0, dtype=float).copy()
    u = np.clip(u, lo, hi)

    res = kkt_residual(H, f, u, lo, hi)
    it = 0
    while res > tol and it < max_iter:
        it += 1
        # projected gradient step
        g = H @ u + f
        d = np.clip(u - g, lo, hi) - u
        curv = d @ H @ d
        if curv > 0:
            alpha = min(1.0, max(0.0, -(g @ d) / curv))
            u = np.clip(u + alpha * d, lo, hi)

        # Newton step on the free variables; a bound variable the step would
        # push outward is fixed and the reduced system solved again
        g = H @ u + f
        fixed = ((u <= lo) & (g > 0)) | ((u >= hi) & (g < 0))
        while not fixed.all():
            free = ~fixed
            step = np.zeros_like(u)
            step[free] = -np.linalg.solve(H[np.ix_(free, free)], g[free])
            blocked = ((u <= lo) & (step < 0)) | ((u >= hi) & (step > 0))
            if not blocked.any():
                break
            fixed |= blocked
        else:
            step = np.zeros_like(u)
        if step.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                t_hi = np.where(step > 0, (hi - u) / step, np.inf)
                t_lo = np.where(step < 0, (lo - u) / step, np.inf)
            t = min(1.0, float(np.min(np.minimum(t_hi, t_lo))))
            u = np.clip(u + t * step, lo, hi)
            # snap variables that reached a bound up to rounding
            u = np.where(u - lo <= 1e-12, lo, np.where(hi - u <= 1e-12, hi, u))
        res = kkt_residual(H, f, u, lo, hi)
    if res > tol:
        raise SolverFault(res, it)
    return QpSolution(u, it, res)
