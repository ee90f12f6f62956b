"""Downhill simplex (Nelder-Mead) minimization inside a box.

Standard coefficients: reflection 1, expansion 2, contraction 0.5, shrink 0.5.
Trial points are clipped to the bounds.  The caller may pass an existing
simplex to continue a search under a changed objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REFLECT = 1.0
EXPAND = 2.0
CONTRACT = 0.5
SHRINK = 0.5


@dataclass
class SimplexResult:
    x: np.ndarray
    f: float
    simplex: np.ndarray
    fvals: np.ndarray
    evaluations: int
    converged: bool


def initial_simplex(x0, steps, lo=None, hi=None, basis=None):
    """Simplex of ``x0`` plus one vertex per column of ``basis`` (default: axes),
    each scaled componentwise by ``steps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    n = len(x0)
    steps = np.asarray(steps, dtype=np.float64)
    basis = np.eye(n) if basis is None else np.asarray(basis, dtype=np.float64)
    sim = np.tile(x0, (n + 1, 1))
    for i in range(n):
        d = basis[:, i] * steps
        # step inward if the outward vertex would leave the box
        if hi is not None and ((x0 + d > hi) | (x0 + d < lo)).any():
            d = -d
        sim[i + 1] += d
    if lo is not None:
        sim = np.clip(sim, lo, hi)
    return sim


def minimize(f, simplex, max_evals, lo=None, hi=None, ftol=1e-12, xtol=1e-10, fvals=None):
    """Run Nelder-Mead from ``simplex`` (``(n+1, n)``) for at most ``max_evals`` calls.

    ``fvals`` may carry already-known objective values of the vertices.
    Stops when both the spread of vertex values is below ``ftol`` and the
    largest vertex distance from the best is below ``xtol``.
    """
    sim = np.array(simplex, dtype=np.float64)
    n = sim.shape[1]
    if lo is not None:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)

    def clip(x):
        return x if lo is None else np.clip(x, lo, hi)

    evals = 0
    if fvals is None:
        fs = np.empty(n + 1)
        for i in range(n + 1):
            if evals >= max_evals:
                fs[i:] = np.inf
                break
            fs[i] = f(sim[i])
            evals += 1
    else:
        fs = np.array(fvals, dtype=np.float64)

    def done():
        order = np.argsort(fs, kind="stable")
        spread = fs[order[-1]] - fs[order[0]]
        size = np.max(np.abs(sim - sim[order[0]]))
        return spread <= ftol and size <= xtol

    converged = False
    while evals < max_evals:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        if done():
            converged = True
            break
        centroid = sim[:-1].mean(axis=0)
        xr = clip(centroid + REFLECT * (centroid - sim[-1]))
        fr = f(xr)
        evals += 1
        if fr < fs[0]:
            if evals >= max_evals:
                sim[-1], fs[-1] = xr, fr
                break
            xe = clip(centroid + EXPAND * (xr - centroid))
            fe = f(xe)
            evals += 1
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
            continue
        if evals >= max_evals:
            break
        if fr < fs[-1]:
            xc = clip(centroid + CONTRACT * (xr - centroid))
            fc = f(xc)
            evals += 1
            if fc <= fr:
                sim[-1], fs[-1] = xc, fc
                continue
        else:
            xc = clip(centroid + CONTRACT * (sim[-1] - centroid))
            fc = f(xc)
            evals += 1
            if fc < fs[-1]:
                sim[-1], fs[-1] = xc, fc
                continue
        for i in range(1, n + 1):
            if evals >= max_evals:
                break
            sim[i] = sim[0] + SHRINK * (sim[i] - sim[0])
            fs[i] = f(sim[i])
            evals += 1
    order = np.argsort(fs, kind="stable")
    sim, fs = sim[order], fs[order]
    return SimplexResult(sim[0].copy(), float(fs[0]), sim, fs, evals, converged)
