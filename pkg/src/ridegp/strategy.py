"""Matching-queue accounting and idle-vehicle relocation strategies.

Single-day panels are handled as ``(Z, T)`` arrays with zone index
``(r-1)*cols + (c-1)``.  Strategies work per time window: targets are
picked from baseline metrics, then every non-target zone adjacent to a
target hands a fixed fraction of its supply to its adjacent targets.

* ``QS`` targets zones whose window queue exceeds ``qs_threshold``.
* ``GS`` targets zones whose window-summed d(matches)/d(supply) exceeds
  ``gs_threshold``; donors whose own gradient lies in the no-donate band keep
  their vehicles.
* ``CS`` targets zones where window queue times window gradient exceeds
  ``cs_threshold``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .gp import predict, predictive_mean_gradients

__all__ = [
    "GradientField",
    "QueueReport",
    "RelocationPlan",
    "StrategyConfig",
    "StrategyResult",
    "apply_relocation",
    "evaluate_strategy",
    "queue_lengths",
    "select_targets",
    "supply_gradient_field",
    "window_slices",
]

SUPPLY_DIM = 4
KINDS = ("QS", "GS", "CS")


@dataclass(frozen=True)
class StrategyConfig:
    window_intervals: int = 10
    fraction: float = 0.10
    qs_threshold: float = 100.0
    gs_threshold: float = 1.2
    gs_no_donate_band: tuple = (1.0, 1.2)
    cs_threshold: float = 100.0
    clamp_queue: bool = False

    def __post_init__(self):
        object.__setattr__(self, "gs_no_donate_band", tuple(float(v) for v in self.gs_no_donate_band))
        if self.window_intervals < 1:
            raise ValueError("window_intervals must be >= 1")
        if not 0 < self.fraction < 1:
            raise ValueError("fraction must lie in (0, 1)")
        if min(self.qs_threshold, self.gs_threshold, self.cs_threshold) < 0:
            raise ValueError("thresholds must be non-negative")
        lo, hi = self.gs_no_donate_band
        if not lo <= hi <= self.gs_threshold:
            raise ValueError("no-donate band must satisfy low <= high <= gs_threshold")

    def to_dict(self):
        d = asdict(self)
        d["gs_no_donate_band"] = list(self.gs_no_donate_band)
        return d


def window_slices(T, window_intervals):
    return [slice(s, min(s + window_intervals, T)) for s in range(0, T, window_intervals)]


def _window_sums(a, window_intervals):
    """Sequential sums of ``a`` (Z, T) over consecutive windows."""
    slices = window_slices(a.shape[1], window_intervals)
    out = np.zeros((a.shape[0], len(slices)))
    for w, sl in enumerate(slices):
        for t in range(sl.start, sl.stop):
            out[:, w] += a[:, t]
    return out


def _zones_by_time(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 3:
        a = a.reshape(-1, a.shape[2])
    if a.ndim != 2:
        raise ValueError(f"expected a (zones, intervals) panel, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class QueueReport:
    q: np.ndarray
    Q_zone: np.ndarray
    Q_total: float
    per_window_Q: np.ndarray
    q0: np.ndarray


def queue_lengths(demand, matches, q0=None, window_intervals=10, clamp=False):
    """Queue length per zone and interval and its cumulative sums.

    ``q[z, t] = q0[z] + sum_{t' <= t} (demand - matches)``; with
    ``clamp=True`` the queue is floored at zero after every interval.
    Sums run sequentially so results are reproducible bit for bit.
    """
    demand = _zones_by_time(demand)
    matches = _zones_by_time(matches)
    if demand.shape != matches.shape:
        raise ValueError(f"demand {demand.shape} and matches {matches.shape} are not aligned")
    Z, T = demand.shape
    q0 = np.zeros(Z) if q0 is None else np.asarray(q0, dtype=float).ravel()
    if q0.shape != (Z,):
        raise ValueError(f"initial queue has {q0.size} zones, panel has {Z}")
    if np.any(q0 < 0):
        raise ValueError("initial queues must be non-negative")
    q = np.zeros((Z, T))
    cur = q0.copy()
    for t in range(T):
        cur = cur + (demand[:, t] - matches[:, t])
        if clamp:
            cur = np.maximum(cur, 0.0)
        q[:, t] = cur
    Q_zone = np.zeros(Z)
    for t in range(T):
        Q_zone += q[:, t]
    Q_total = 0.0
    for v in Q_zone:
        Q_total += float(v)
    return QueueReport(q, Q_zone, Q_total, _window_sums(q, window_intervals), q0)


@dataclass(frozen=True, eq=False)
class GradientField:
    per_interval: np.ndarray
    per_window: np.ndarray


def supply_gradient_field(model, panel, window_intervals=10):
    """Window sums of d(predicted matches)/d(supply) per zone."""
    rows, cols, T = panel.shape
    if model.expr.uses_dim(SUPPLY_DIM):
        g = predictive_mean_gradients(model, panel.inputs(), SUPPLY_DIM).reshape(rows * cols, T)
    else:
        g = np.zeros((rows * cols, T))
    return GradientField(g, _window_sums(g, window_intervals))


def select_targets(kind, queue_report, gradient_field, config):
    """Boolean ``(Z, W)`` mask of target zones per window (strict thresholds)."""
    if kind not in KINDS:
        raise ValueError(f"unknown strategy {kind!r}; choose from {KINDS}")
    Q = queue_report.per_window_Q
    if kind == "QS":
        return Q > config.qs_threshold
    if gradient_field is None:
        raise ValueError(f"strategy {kind} needs a gradient field")
    G = gradient_field.per_window
    if G.shape != Q.shape:
        raise ValueError(f"gradient field {G.shape} and queue windows {Q.shape} differ")
    if kind == "GS":
        return G > config.gs_threshold
    return Q * G > config.cs_threshold


@dataclass
class RelocationPlan:
    windows: list = field(default_factory=list)
    revised_supply: np.ndarray | None = None

    @property
    def transfers(self):
        return [tr for w in self.windows for tr in w["transfers"]]


def apply_relocation(supply, targets, adjacency, config, kind, gradient_window=None):
    """Move ``fraction`` of each donor's supply to its adjacent targets.

    Donors are non-target zones adjacent to at least one target of the
    window; under GS a donor whose window gradient lies inside the
    no-donate band is skipped.  Outflow is split equally across the donor's
    adjacent targets and all moves in a window use pre-revision supply.
    """
    supply = _zones_by_time(supply)
    targets = np.asarray(targets, dtype=bool)
    Z, T = supply.shape
    if len(adjacency) != Z:
        raise ValueError(f"adjacency covers {len(adjacency)} zones, panel has {Z}")
    slices = window_slices(T, config.window_intervals)
    if targets.shape != (Z, len(slices)):
        raise ValueError(f"targets shape {targets.shape}, expected {(Z, len(slices))}")
    if kind == "GS" and gradient_window is None:
        raise ValueError("GS relocation needs the window gradients for the no-donate band")
    lo, hi = config.gs_no_donate_band
    revised = supply.copy()
    plan = RelocationPlan()
    for w, sl in enumerate(slices):
        entry = {"window": w, "targets": [int(z) for z in np.flatnonzero(targets[:, w])], "transfers": []}
        for donor in range(Z):
            if targets[donor, w]:
                continue
            adj_targets = [j for j in adjacency[donor] if targets[j, w]]
            if not adj_targets:
                continue
            if kind == "GS" and lo <= gradient_window[donor, w] <= hi:
                continue
            out = config.fraction * supply[donor, sl]
            share = out / len(adj_targets)
            revised[donor, sl] -= out
            for j in adj_targets:
                revised[j, sl] += share
                entry["transfers"].append({
                    "donor": donor, "target": int(j), "window": w,
                    "amounts": [float(v) for v in share],
                })
        plan.windows.append(entry)
    if np.any(revised < 0):
        raise AssertionError("relocation produced negative supply")
    plan.revised_supply = revised
    return revised, plan


@dataclass(frozen=True, eq=False)
class StrategyResult:
    kind: str
    config: StrategyConfig
    plan: RelocationPlan
    before: QueueReport
    after: QueueReport
    gradient: GradientField
    targets: np.ndarray
    baseline_matches: np.ndarray
    revised_matches: np.ndarray

    @property
    def Q_before(self):
        return self.before.Q_total

    @property
    def Q_after(self):
        return self.after.Q_total

    @property
    def per_zone_delta(self):
        return self.after.Q_zone - self.before.Q_zone

    def to_dict(self, cols):
        def rc(z):
            return {"r": int(z // cols) + 1, "c": int(z % cols) + 1}

        return {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "targets_per_window": [
                [rc(z) for z in np.flatnonzero(self.targets[:, w])]
                for w in range(self.targets.shape[1])
            ],
            "transfers": [
                {"donor": rc(t["donor"]), "target": rc(t["target"]),
                 "window": t["window"], "amounts": t["amounts"]}
                for t in self.plan.transfers
            ],
            "Q_before": self.Q_before,
            "Q_after": self.Q_after,
            "per_zone": [
                dict(rc(z), Q_before=float(self.before.Q_zone[z]), Q_after=float(self.after.Q_zone[z]))
                for z in range(len(self.before.Q_zone))
            ],
        }

    def write(self, report_path, metrics_path, cols):
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(cols), fh, indent=1, sort_keys=True)
            fh.write("\n")
        Q = self.before.per_window_Q
        G = self.gradient.per_window
        with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "c", "window", "queue", "gradient", "queue_x_gradient", "target"])
            for z in range(Q.shape[0]):
                for k in range(Q.shape[1]):
                    w.writerow([z // cols + 1, z % cols + 1, k + 1,
                                format(Q[z, k], ".17g"), format(G[z, k], ".17g"),
                                format(Q[z, k] * G[z, k], ".17g"), int(self.targets[z, k])])


def evaluate_strategy(model, panel, q0, kind, config, adjacency):
    """Baseline queue, strategy relocation and the queue after re-prediction.

    Targets are identified once from the baseline predictions; only supply
    is revised, demand and the other covariates stay fixed.
    """
    config = config or StrategyConfig()
    rows, cols, T = panel.shape
    Z = rows * cols
    demand = panel.flat("demand")
    base = predict(model, panel.inputs()).mean.reshape(Z, T)
    before = queue_lengths(demand, base, q0, config.window_intervals, config.clamp_queue)
    grad = supply_gradient_field(model, panel, config.window_intervals)
    targets = select_targets(kind, before, grad, config)
    revised, plan = apply_relocation(panel.flat("supply"), targets, adjacency, config, kind, grad.per_window)
    if plan.transfers:
        new = predict(model, panel.inputs(supply=revised)).mean.reshape(Z, T)
        after = queue_lengths(demand, new, q0, config.window_intervals, config.clamp_queue)
    else:
        new, after = base, before
    return StrategyResult(kind, config, plan, before, after, grad, targets, base, new)
