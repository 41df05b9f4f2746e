"""Analytical matching baselines: PMQ, SPMQ and the Cobb-Douglas matching function.

Panels for one day are arrays of shape ``(Z, T)`` (zones x intervals).
Adjacency is a sequence of length ``Z`` holding neighbour zone indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

__all__ = [
    "CDMFParams",
    "SPMQParams",
    "cdmf_predict",
    "fit_cdmf",
    "fit_spmq",
    "pmq_predict",
    "rollforward_cumulative_demand",
    "spmq_loss",
    "spmq_predict",
]

SPMQ_GRID = np.round(np.arange(0, 41) * 0.05, 10)


@dataclass(frozen=True)
class CDMFParams:
    A: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError(f"productivity factor A must be positive, got {self.A}")


@dataclass(frozen=True)
class SPMQParams:
    a: float
    b: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError(f"SPMQ weights must be non-negative, got a={self.a}, b={self.b}")


def rollforward_cumulative_demand(prev_xcd, prev_matches, new_demand):
    """Unserved queue carried over plus the new arrivals."""
    if prev_xcd < 0 or prev_matches < 0 or new_demand < 0:
        raise ValueError("queue, matches and demand must be non-negative")
    return max(0.0, prev_xcd - prev_matches) + new_demand


def _day_arrays(demand, supply):
    demand = np.atleast_2d(np.asarray(demand, dtype=float))
    supply = np.atleast_2d(np.asarray(supply, dtype=float))
    if demand.shape != supply.shape:
        raise ValueError(f"demand {demand.shape} and supply {supply.shape} are not aligned")
    return demand, supply


def _queue_match(demand, eff_supply, initial_xcd):
    Z, T = demand.shape
    xcd = np.zeros(Z) if initial_xcd is None else np.asarray(initial_xcd, dtype=float).copy()
    if xcd.shape != (Z,):
        raise ValueError(f"initial queue has shape {xcd.shape}, expected ({Z},)")
    matches = np.zeros((Z, T))
    served = np.zeros(Z)
    for t in range(T):
        xcd = np.maximum(0.0, xcd - served) + demand[:, t]
        served = np.minimum(xcd, eff_supply[:, t])
        matches[:, t] = served
    return matches


def pmq_predict(demand, supply, initial_xcd=None):
    """Perfect matching with queueing: ``min(cumulative demand, supply)`` per interval.

    The queue rolls forward with the model's own predicted matches.
    """
    demand, supply = _day_arrays(demand, supply)
    return _queue_match(demand, supply, initial_xcd)


def effective_supply(supply, params, adjacency):
    supply = np.atleast_2d(np.asarray(supply, dtype=float))
    if len(adjacency) != supply.shape[0]:
        raise ValueError(f"adjacency covers {len(adjacency)} zones, panel has {supply.shape[0]}")
    nb = np.zeros_like(supply)
    for z, neighbours in enumerate(adjacency):
        for j in neighbours:
            nb[z] += supply[j]
    return params.a * supply + params.b * nb


def spmq_predict(demand, supply, params, adjacency, initial_xcd=None):
    demand, supply = _day_arrays(demand, supply)
    return _queue_match(demand, effective_supply(supply, params, adjacency), initial_xcd)


def spmq_loss(days, params, adjacency):
    """Sum of squared match errors; ``days`` yields (demand, supply, matches)."""
    loss = 0.0
    for demand, supply, matches in days:
        pred = spmq_predict(demand, supply, params, adjacency)
        loss += float(np.sum((np.asarray(matches) - pred) ** 2))
    return loss


def fit_spmq(days, adjacency, refine_tol=1e-6):
    """Grid search over (a, b) in {0, 0.05, ..., 2} then compass refinement.

    ``days`` is an observation grid or a sequence of ``(demand, supply,
    matches)`` arrays of shape ``(Z, T)``.  Ties keep the smaller ``b``, then the smaller ``a``.
    """
    if hasattr(days, "day_arrays"):
        days = days.day_arrays()
    days = [tuple(np.asarray(a, dtype=float) for a in d) for d in days]
    if not days:
        raise ValueError("need at least one day to fit SPMQ")
    best = None
    for b in SPMQ_GRID:
        for a in SPMQ_GRID:
            loss = spmq_loss(days, SPMQParams(a, b), adjacency)
            if best is None or loss < best[0]:
                best = (loss, a, b)
    loss, a, b = best
    step = 0.025
    while step > refine_tol:
        improved = False
        for da, db in ((0, -step), (-step, 0), (step, 0), (0, step)):
            na, nb = a + da, b + db
            if na < 0 or nb < 0:
                continue
            trial = spmq_loss(days, SPMQParams(na, nb), adjacency)
            if trial < loss:
                loss, a, b = trial, na, nb
                improved = True
                break
        if not improved:
            step /= 2
    return SPMQParams(float(a), float(b))


def _power(x, e):
    x = np.asarray(x, dtype=float)
    zero = x == 0
    if np.any(zero & (e <= 0)):
        raise ValueError("zero input with a non-positive exponent is undefined")
    with np.errstate(divide="ignore"):
        out = np.where(zero, 0.0, np.power(np.where(zero, 1.0, x), e))
    return out


def cdmf_predict(x_d, x_s, params):
    """``A * d**alpha * s**beta`` with ``0**e = 0`` for ``e > 0``."""
    x_d = np.asarray(x_d, dtype=float)
    x_s = np.asarray(x_s, dtype=float)
    if np.any(x_d < 0) or np.any(x_s < 0):
        raise ValueError("demand and supply must be non-negative")
    out = params.A * _power(x_d, params.alpha) * _power(x_s, params.beta)
    return float(out) if out.ndim == 0 else out


def _cdmf_loss(w, d, s, y):
    logA, alpha, beta = w
    pos = (d > 0) & (s > 0)
    pred = np.zeros_like(y)
    ld, ls = np.log(d[pos]), np.log(s[pos])
    # zero inputs give zero predictions whatever the (positive) exponents
    with np.errstate(over="ignore", invalid="ignore"):
        pred[pos] = np.exp(logA + alpha * ld + beta * ls)
        r = pred - y
        loss = float(r @ r)
        rp = 2.0 * r[pos] * pred[pos]
        grad = np.array([rp.sum(), rp @ ld, rp @ ls])
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        return np.inf, np.zeros(3)
    return loss, grad


def fit_cdmf(x_d, x_s, y):
    """Log-OLS initialisation on positive samples, then L-BFGS on the raw squared loss."""
    d = np.asarray(x_d, dtype=float).ravel()
    s = np.asarray(x_s, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if not d.shape == s.shape == y.shape:
        raise ValueError("x_d, x_s and y must have equal lengths")
    pos = (d > 0) & (s > 0) & (y > 0)
    if pos.sum() < 3:
        raise ValueError(f"need at least 3 samples with positive demand, supply and output, got {pos.sum()}")
    design = np.column_stack([np.ones(pos.sum()), np.log(d[pos]), np.log(s[pos])])
    w0, *_ = np.linalg.lstsq(design, np.log(y[pos]), rcond=None)
    loss0, _ = _cdmf_loss(w0, d, s, y)
    res = optimize.minimize(
        _cdmf_loss, w0, args=(d, s, y), jac=True, method="L-BFGS-B",
        options={"maxiter": 1000, "ftol": 1e-15, "gtol": 1e-12},
    )
    w = res.x if np.isfinite(res.fun) and res.fun <= loss0 else w0
    return CDMFParams(float(np.exp(w[0])), float(w[1]), float(w[2]))
