"""Root finders for the empirical estimating equations.

Step-type equations (quantile-like) jump only at observed outcomes, so the
least-squares solution can be located exactly on that candidate grid:
binary search over the prefix sums when the jumps are all nonnegative, a
full scan otherwise.  Continuous strictly-decreasing equations
(expectile-like) go through Brent's method on an expanding bracket.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import EmptyPoints, SolverNoCandidate


@dataclass(frozen=True)
class StepParts:
    """g(theta) = offset + sum of weights at values <= theta."""

    values: np.ndarray
    weights: np.ndarray
    offset: float


def step_function_values(values, weights, offset):
    """Unique sorted candidates and g evaluated at each (duplicates merged)."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.size == 0:
        raise EmptyPoints("step equation has no jump points")
    if not (np.isfinite(values).all() and np.isfinite(weights).all()):
        raise EmptyPoints("non-finite jump points or weights")
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    cands, start = np.unique(v, return_index=True)
    csum = np.cumsum(w)
    # cumulative weight through the last occurrence of each distinct value
    last = np.append(start[1:], len(v)) - 1
    g = offset + csum[last]
    return cands, g


def solve_step_equation(values, weights, offset, monotone: bool = True) -> float:
    """Observed value minimizing |offset + prefix-sum|, ties toward the smallest.

    With ``monotone`` the weights are taken as all nonnegative and the sign
    change is found by binary search; otherwise every candidate is scanned.
    """
    cands, g = step_function_values(values, weights, offset)
    if monotone:
        idx = int(np.searchsorted(g, 0.0, side="left"))
        if idx == 0:
            return float(cands[0])
        if idx == len(g):
            return float(cands[-1])
        return float(cands[idx - 1] if abs(g[idx - 1]) <= abs(g[idx]) else cands[idx])
    return float(cands[int(np.argmin(np.abs(g)))])


def solve_decreasing_root(f, lo: float, hi: float, max_expand: int = 60) -> float:
    """Root of a continuous decreasing scalar function, expanding the bracket."""
    span = max(hi - lo, 1.0)
    flo, fhi = f(lo), f(hi)
    expansions = 0
    while flo < 0.0 and expansions < max_expand:
        lo -= span
        span *= 2.0
        flo = f(lo)
        expansions += 1
    span = max(hi - lo, 1.0)
    while fhi > 0.0 and expansions < max_expand:
        hi += span
        span *= 2.0
        fhi = f(hi)
        expansions += 1
    if flo < 0.0 or fhi > 0.0:
        raise SolverNoCandidate("could not bracket a root of the decreasing equation")
    if flo == 0.0:
        return float(lo)
    if fhi == 0.0:
        return float(hi)
    return float(brentq(f, lo, hi, xtol=1e-12, rtol=8.9e-16, maxiter=200))
