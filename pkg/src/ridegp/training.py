"""Maximum marginal likelihood fitting of kernel hyperparameters.

Optimisation runs in log-theta space with a small projected L-BFGS and an
Armijo backtracking line search.  Bounds are box constraints on log theta.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .gp import CholeskyError, lml_and_gradient

__all__ = [
    "PRESET_THETA",
    "RestartResult",
    "TrainConfig",
    "TrainReport",
    "default_bounds",
    "optimize_hyperparams",
    "preset_theta",
]

log = logging.getLogger(__name__)

# AGPM-5 fitted vectors averaged over five training folds, layout
# [var1, l_rc, l_t, l_d, var2, l_rc, l_t, l_s, noise]
PRESET_THETA = {
    "matching": (5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1),
    "pickup": (3.9, 1.0, 20.4, 29.5, 0.8, 0.2, 5.8, 1.3, 7.4),
}

SCALE_BOUNDS = (1e-3, 1e4)
VARIANCE_BOUNDS = (1e-6, 1e6)


def preset_theta(name):
    try:
        return np.array(PRESET_THETA[name], dtype=float)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_THETA)}") from None


def default_bounds(expr):
    return [
        VARIANCE_BOUNDS if kind in ("variance", "noise") else SCALE_BOUNDS
        for kind in expr.slot_kinds()
    ]


@dataclass
class TrainConfig:
    restarts: int = 3
    max_iters: int = 200
    grad_tol: float = 1e-5
    rel_f_tol: float = 1e-6
    bounds: list | None = None
    seed: int = 0
    init: str = "log-uniform-random"
    preset: list | str | None = None
    memory: int = 10

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.init not in ("log-uniform-random", "preset-vector"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "preset-vector" and self.preset is None:
            raise ValueError("init 'preset-vector' needs a preset")
        if self.bounds is not None:
            self.bounds = [tuple(map(float, b)) for b in self.bounds]
            for lo, hi in self.bounds:
                if not 0 < lo < hi:
                    raise ValueError(f"invalid bounds [{lo}, {hi}]")

    def resolved_bounds(self, expr):
        bounds = self.bounds if self.bounds is not None else default_bounds(expr)
        if len(bounds) != expr.n_theta:
            raise ValueError(f"{len(bounds)} bounds given, kernel has {expr.n_theta} slots")
        return np.array(bounds, dtype=float)

    def preset_vector(self):
        if isinstance(self.preset, str):
            return preset_theta(self.preset)
        return np.asarray(self.preset, dtype=float)

    def to_dict(self):
        d = asdict(self)
        if d["bounds"] is not None:
            d["bounds"] = [list(b) for b in d["bounds"]]
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RestartResult:
    init: list
    final_lml: float
    iterations: int
    converged: bool
    theta: list = field(default_factory=list)
    history: list = field(default_factory=list)


@dataclass
class TrainReport:
    best_theta: np.ndarray
    best_lml: float
    per_restart: list

    def to_dict(self):
        return {
            "best_theta": [float(v) for v in self.best_theta],
            "best_lml": self.best_lml,
            "per_restart": [
                {
                    "init": r.init,
                    "final_lml": r.final_lml,
                    "iterations": r.iterations,
                    "converged": r.converged,
                    "theta": r.theta,
                }
                for r in self.per_restart
            ],
        }


class _Objective:
    """Negative log marginal likelihood over the free log-theta slots."""

    def __init__(self, expr, X, Y, base_log, free):
        self.expr, self.X, self.Y = expr, X, Y
        self.base_log = base_log
        self.free = free

    def theta(self, z):
        w = self.base_log.copy()
        w[self.free] = z
        return np.exp(w)

    def __call__(self, z):
        theta = self.theta(z)
        try:
            lml, grad = lml_and_gradient(self.expr, theta, self.X, self.Y)
        except CholeskyError:
            return np.inf, None
        # chain rule for the log reparameterisation
        return -lml, -(grad * theta)[self.free]


def _two_loop(g, S, Yv):
    q = g.copy()
    rhos, alphas = [], []
    for s, y in zip(reversed(S), reversed(Yv)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        rhos.append(rho)
        alphas.append(a)
    if S:
        q *= (S[-1] @ Yv[-1]) / (Yv[-1] @ Yv[-1])
    for (s, y), rho, a in zip(zip(S, Yv), reversed(rhos), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _projected_grad(z, g, lo, hi):
    return z - np.clip(z - g, lo, hi)


def _lbfgs(fun, z0, lo, hi, config):
    """Minimise ``fun`` over the box [lo, hi]; returns (z, f, iters, converged, history)."""
    z = np.clip(z0, lo, hi)
    f, g = fun(z)
    if not np.isfinite(f):
        raise CholeskyError("objective undefined at the initial point")
    history = [f]
    S, Yv = [], []
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        if np.max(np.abs(_projected_grad(z, g, lo, hi)), initial=0.0) < config.grad_tol:
            converged = True
            it -= 1
            break
        p = -_two_loop(g, S, Yv)
        # freeze coordinates pinned at a bound and pushed outward
        pinned = ((z <= lo) & (p < 0)) | ((z >= hi) & (p > 0))
        p[pinned] = 0.0
        if not S:
            step_max = np.max(np.abs(p), initial=0.0)
            if step_max > 1.0:
                p /= step_max
        if g @ p >= 0:
            S.clear()
            Yv.clear()
            p = -g.copy()
            p[((z <= lo) & (p < 0)) | ((z >= hi) & (p > 0))] = 0.0
            step_max = np.max(np.abs(p), initial=0.0)
            if step_max > 1.0:
                p /= step_max
        t = 1.0
        accepted = False
        for _ in range(40):
            z_new = np.clip(z + t * p, lo, hi)
            f_new, g_new = fun(z_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * (g @ (z_new - z)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = np.max(np.abs(_projected_grad(z, g, lo, hi)), initial=0.0) < np.sqrt(config.grad_tol)
            break
        assert f_new <= f, "line search accepted an increase of the objective"
        s, y = z_new - z, g_new - g
        if s @ y > 1e-12:
            S.append(s)
            Yv.append(y)
            if len(S) > config.memory:
                S.pop(0)
                Yv.pop(0)
        rel = (f - f_new) / max(abs(f), abs(f_new), 1.0)
        z, f, g = z_new, f_new, g_new
        history.append(f)
        if rel < config.rel_f_tol:
            converged = True
            break
    return z, f, it, converged, history


def optimize_hyperparams(expr, X, Y, config=None, frozen=None):
    """Multi-restart maximum marginal likelihood fit.

    ``frozen`` maps theta slot indices to fixed values that are not optimised.
    Restart 0 starts from the preset when ``config.init == 'preset-vector'``;
    all other restarts draw log theta uniformly inside the bounds.
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("need at least two training points")
    bounds = np.log(config.resolved_bounds(expr))
    frozen = dict(frozen or {})
    free = np.array([i for i in range(expr.n_theta) if i not in frozen], dtype=int)
    rng = np.random.default_rng(config.seed)

    results = []
    for k in range(config.restarts):
        init_log = rng.uniform(bounds[:, 0], bounds[:, 1])
        if k == 0 and config.init == "preset-vector":
            preset = config.preset_vector()
            if preset.shape != (expr.n_theta,):
                raise ValueError(f"preset has {preset.size} slots, kernel needs {expr.n_theta}")
            init_log = np.clip(np.log(preset), bounds[:, 0], bounds[:, 1])
        for i, v in frozen.items():
            init_log[i] = np.log(v)
        fun = _Objective(expr, X, Y, init_log, free)
        try:
            z, f, iters, converged, history = _lbfgs(
                fun, init_log[free], bounds[free, 0], bounds[free, 1], config
            )
        except CholeskyError:
            log.warning("restart %d failed to factorise at its initial point", k)
            continue
        theta = fun.theta(z)
        log.info("restart %d: lml=%.6f iters=%d converged=%s", k, -f, iters, converged)
        results.append(RestartResult(
            init=[float(v) for v in np.exp(init_log)],
            final_lml=float(-f),
            iterations=int(iters),
            converged=bool(converged),
            theta=[float(v) for v in theta],
            history=[float(-h) for h in history],
        ))
    if not results:
        raise CholeskyError("every restart failed to factorise the covariance at initialisation")
    best = max(results, key=lambda r: r.final_lml)
    return TrainReport(np.array(best.theta), best.final_lml, results)
