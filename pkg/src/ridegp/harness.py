"""Accuracy metrics, leave-one-day-out cross-validation and model dispatch."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import (
    CDMFParams,
    SPMQParams,
    cdmf_predict,
    fit_cdmf,
    fit_spmq,
    pmq_predict,
    spmq_predict,
)
from .gp import fit_cache, model_from_dict, model_to_dict, predict
from .kernels import parse_kernel_spec
from .training import TrainConfig, optimize_hyperparams

__all__ = [
    "CVResult",
    "FoldSpec",
    "Metrics",
    "MODEL_KINDS",
    "compute_metrics",
    "cross_validate",
    "emit_scatter",
    "fit_model",
    "load_fitted",
    "make_folds",
    "save_fitted",
]

log = logging.getLogger(__name__)

MODEL_KINDS = ("agpm", "pmq", "spmq", "cdmf")
# PMQ/SPMQ only describe matching; they have no pickup counterpart
MATCH_ONLY = ("pmq", "spmq")


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    r2: float
    n: int

    def to_dict(self):
        return asdict(self)


def compute_metrics(observed, predicted):
    o = np.asarray(observed, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if o.shape != p.shape:
        raise ValueError(f"observed ({o.size}) and predicted ({p.size}) lengths differ")
    if o.size == 0:
        raise ValueError("need at least one observation")
    ss_tot = float(np.sum((o - o.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("R^2 undefined for constant observations")
    r = o - p
    ss_res = float(r @ r)
    return Metrics(
        mae=float(np.mean(np.abs(r))),
        rmse=float(np.sqrt(ss_res / o.size)),
        r2=1.0 - ss_res / ss_tot,
        n=int(o.size),
    )


@dataclass(frozen=True)
class FoldSpec:
    held_out_day: str
    training_days: tuple

    def __post_init__(self):
        if self.held_out_day in self.training_days:
            raise ValueError("held-out day appears among the training days")


def make_folds(days):
    days = tuple(days)
    return [FoldSpec(d, tuple(x for x in days if x != d)) for d in days]


# -- fitted models --------------------------------------------------------------

@dataclass
class FittedModel:
    kind: str
    target: str
    gp: object = None
    params: object = None
    adjacency: list | None = None
    report: object = None

    def predict_day(self, panel):
        """Predicted target for one day panel, flattened in (r, c, t) order."""
        if self.kind == "agpm":
            return predict(self.gp, panel.inputs()).mean
        d, s = panel.flat("demand"), panel.flat("supply")
        if self.kind == "pmq":
            return pmq_predict(d, s).ravel()
        if self.kind == "spmq":
            return spmq_predict(d, s, self.params, self.adjacency).ravel()
        # zero-input cells predict 0, matching how the fitting loss scores them
        pos = (d > 0) & (s > 0)
        out = np.zeros(d.shape)
        out[pos] = cdmf_predict(d[pos], s[pos], self.params)
        return out.ravel()

    def to_dict(self):
        if self.kind == "agpm":
            doc = model_to_dict(self.gp)
        else:
            doc = {"model_kind": self.kind}
            if self.params is not None:
                doc["params"] = asdict(self.params)
            if self.adjacency is not None:
                doc["adjacency"] = self.adjacency
        doc["target"] = self.target
        return doc


def _check_pair(kind, target):
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    if target not in ("matches", "pickups"):
        raise ValueError(f"unknown target {target!r}")
    if kind in MATCH_ONLY and target == "pickups":
        raise ValueError(
            f"{kind.upper()} models matching only and has no pickup results"
        )


def fit_model(grid, kind, target="matches", kernel="AGPM5", train_config=None, theta=None):
    """Fit a model on every day of ``grid``.

    For ``agpm`` a given ``theta`` is used as-is; otherwise hyperparameters
    are fitted with ``train_config``.
    """
    _check_pair(kind, target)
    if kind == "agpm":
        expr = parse_kernel_spec(kernel) if isinstance(kernel, str) else kernel
        X, Y = grid.inputs(), grid.target(target)
        report = None
        if theta is None:
            report = optimize_hyperparams(expr, X, Y, train_config or TrainConfig())
            theta = report.best_theta
        return FittedModel(kind, target, gp=fit_cache(expr, theta, X, Y), report=report)
    if kind == "pmq":
        return FittedModel(kind, target)
    if kind == "spmq":
        adj = grid.adjacency()
        return FittedModel(kind, target, params=fit_spmq(grid.day_arrays(), adj), adjacency=adj)
    y = grid.target(target)
    return FittedModel(kind, target, params=fit_cdmf(grid.demand.ravel(), grid.supply.ravel(), y))


def save_fitted(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_fitted(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("model_kind")
    target = doc.get("target", "matches")
    if kind == "agpm":
        return FittedModel(kind, target, gp=model_from_dict(doc))
    if kind == "pmq":
        return FittedModel(kind, target)
    if kind == "spmq":
        return FittedModel(kind, target, params=SPMQParams(**doc["params"]), adjacency=doc["adjacency"])
    if kind == "cdmf":
        return FittedModel(kind, target, params=CDMFParams(**doc["params"]))
    raise ValueError(f"{path}: unknown model_kind {kind!r}")


# -- cross-validation -----------------------------------------------------------

@dataclass
class FoldResult:
    fold: FoldSpec
    metrics: Metrics
    observed: np.ndarray = field(repr=False)
    predicted: np.ndarray = field(repr=False)
    model: FittedModel | None = field(default=None, repr=False)


@dataclass
class CVResult:
    per_fold: list
    averaged: dict
    pooled: Metrics

    def to_dict(self):
        return {
            "per_fold": [
                dict(held_out_day=f.fold.held_out_day, **f.metrics.to_dict()) for f in self.per_fold
            ],
            "averaged": self.averaged,
            "pooled": self.pooled.to_dict(),
        }

    @property
    def observed(self):
        return np.concatenate([f.observed for f in self.per_fold])

    @property
    def predicted(self):
        return np.concatenate([f.predicted for f in self.per_fold])


def cross_validate(grid, model_kind, model_config=None, target="matches"):
    """Leave-one-day-out cross-validation.

    ``model_config`` is passed to :func:`fit_model` (``kernel``,
    ``train_config``, ``theta``).  Fold metrics are averaged arithmetically;
    pooled metrics over all held-out cells are reported alongside.
    """
    _check_pair(model_kind, target)
    if grid.n_days < 2:
        raise ValueError("cross-validation needs at least two days")
    model_config = dict(model_config or {})
    folds = []
    for k, spec in enumerate(make_folds(grid.days)):
        train_idx = [grid.days.index(d) for d in spec.training_days]
        model = fit_model(grid.select(train_idx), model_kind, target, **model_config)
        held = grid.day(spec.held_out_day)
        pred = model.predict_day(held)
        obs = getattr(held, target).ravel()
        m = compute_metrics(obs, pred)
        log.info("fold %d (%s): mae=%.4f rmse=%.4f r2=%.4f", k, spec.held_out_day, m.mae, m.rmse, m.r2)
        folds.append(FoldResult(spec, m, obs, pred, model))
    averaged = {
        key: float(sum(getattr(f.metrics, key) for f in folds) / len(folds))
        for key in ("mae", "rmse", "r2")
    }
    pooled = compute_metrics(
        np.concatenate([f.observed for f in folds]), np.concatenate([f.predicted for f in folds])
    )
    return CVResult(folds, averaged, pooled)


def emit_scatter(observed, predicted, path):
    """CSV of observed vs predicted with a flag for points on the diagonal."""
    o = np.asarray(observed, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if o.shape != p.shape:
        raise ValueError("observed and predicted lengths differ")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observed", "predicted", "on_diagonal"])
        for a, b in zip(o, p):
            w.writerow([format(a, ".17g"), format(b, ".17g"), int(a == b)])
