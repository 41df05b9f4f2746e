"""Order records, hexagon zoning, panel aggregation and synthetic markets.

Zones are pointy-top hexagons in an offset layout: row 1 is the northern
row, column 1 the western column, and odd rows sit half a column-spacing
east of even rows.  The anchor ``(origin_lat, origin_lon)`` is the centre
of zone (1, 1).  Panels hold one value per (day, row, column, interval);
counts are stored as floats so relocated (fractional) supply fits the same
arrays.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, time, timedelta

import numpy as np

from .baselines import SPMQParams, CDMFParams, cdmf_predict, spmq_predict
from .gp import factorize
from .kernels import gram_matrix, parse_kernel_spec
from .training import preset_theta

__all__ = [
    "AggregationReport",
    "DayPanel",
    "GridConfig",
    "MarketSpec",
    "ObservationGrid",
    "OrderRecord",
    "PanelFormatError",
    "SyntheticMarket",
    "aggregate_orders",
    "adjacency_list",
    "hex_center",
    "hex_neighbors",
    "hex_zone_of",
    "load_grid",
    "read_orders",
    "sample_latent",
    "save_grid",
    "synthesize_market",
    "write_orders",
]

EARTH_RADIUS_M = 6371008.8
PANEL_COLUMNS = ("day", "r", "c", "t", "demand", "supply", "matches", "pickups")
ORDER_COLUMNS = (
    "create_time", "match_time", "pickup_time", "finish_time",
    "origin_lat", "origin_lon", "dest_lat", "dest_lon",
)
FIELDS = ("demand", "supply", "matches", "pickups")


class PanelFormatError(ValueError):
    pass


def _num(v):
    return format(float(v), ".17g")


# -- grid configuration and hexagon geometry ------------------------------------

@dataclass(frozen=True)
class GridConfig:
    rows: int = 6
    cols: int = 6
    origin_lat: float = 30.27
    origin_lon: float = 120.15
    hex_radius_m: float = 1000.0
    interval_s: int = 180
    horizon: tuple = ("07:30:00", "09:30:00")
    days: tuple | None = None
    adjacency_convention: str = "odd-r"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and one column")
        if self.interval_s <= 0:
            raise ValueError("interval_s must be positive")
        if self.hex_radius_m <= 0:
            raise ValueError("hex_radius_m must be positive")
        if self.adjacency_convention != "odd-r":
            raise ValueError(f"unsupported adjacency convention {self.adjacency_convention!r}")
        object.__setattr__(self, "horizon", tuple(self.horizon))
        if self.days is not None:
            object.__setattr__(self, "days", tuple(str(d) for d in self.days))
        span = self.horizon_seconds
        if span <= 0:
            raise ValueError("horizon start must precede its end")
        if span % self.interval_s:
            raise ValueError("horizon length must be a whole number of intervals")

    @property
    def start_time(self):
        return time.fromisoformat(self.horizon[0])

    @property
    def end_time(self):
        return time.fromisoformat(self.horizon[1])

    @property
    def horizon_seconds(self):
        s, e = self.start_time, self.end_time
        return (e.hour * 3600 + e.minute * 60 + e.second) - (s.hour * 3600 + s.minute * 60 + s.second)

    @property
    def intervals(self):
        return self.horizon_seconds // self.interval_s

    @property
    def col_spacing(self):
        return math.sqrt(3.0) * self.hex_radius_m

    @property
    def row_spacing(self):
        return 1.5 * self.hex_radius_m

    def to_dict(self):
        d = asdict(self)
        d["horizon"] = list(self.horizon)
        d["days"] = None if self.days is None else list(self.days)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _to_local(lat, lon, config):
    """Equirectangular (east, north) metres from the anchor."""
    k = math.pi / 180.0 * EARTH_RADIUS_M
    east = (lon - config.origin_lon) * k * math.cos(math.radians(config.origin_lat))
    north = (lat - config.origin_lat) * k
    return east, north


def _from_local(east, north, config):
    k = math.pi / 180.0 * EARTH_RADIUS_M
    lat = config.origin_lat + north / k
    lon = config.origin_lon + east / (k * math.cos(math.radians(config.origin_lat)))
    return lat, lon


def _center_local(r, c, config):
    east = (c - 1) * config.col_spacing - (0.0 if r % 2 == 1 else config.col_spacing / 2)
    north = -(r - 1) * config.row_spacing
    return east, north


def hex_center(r, c, config):
    """(lat, lon) of a zone centre."""
    return _from_local(*_center_local(r, c, config), config)


def hex_zone_of(lat, lon, config):
    """Zone ``(r, c)`` containing the point, or ``None`` outside the grid.

    The nearest centre is searched over the unbounded lattice so a point in
    a hexagon just outside the grid is reported as outside rather than
    snapped to a boundary zone.  Exact ties go to the smaller (r, c).
    """
    east, north = _to_local(lat, lon, config)
    r0 = int(round(1 - north / config.row_spacing))
    best = None
    for r in range(r0 - 1, r0 + 2):
        shift = 0.0 if r % 2 == 1 else config.col_spacing / 2
        c0 = int(round((east + shift) / config.col_spacing + 1))
        for c in range(c0 - 1, c0 + 2):
            ce, cn = _center_local(r, c, config)
            key = ((east - ce) ** 2 + (north - cn) ** 2, r, c)
            if best is None or key < best:
                best = key
    _, r, c = best
    if 1 <= r <= config.rows and 1 <= c <= config.cols:
        return r, c
    return None


def hex_neighbors(r, c, config):
    """In-grid neighbours under the odd-row-shifted convention (at most 6)."""
    if not (1 <= r <= config.rows and 1 <= c <= config.cols):
        raise ValueError(f"zone ({r}, {c}) is outside the {config.rows}x{config.cols} grid")
    delta = 1 if r % 2 == 1 else -1
    candidates = [
        (r, c - 1), (r, c + 1),
        (r - 1, c), (r + 1, c),
        (r - 1, c + delta), (r + 1, c + delta),
    ]
    return [
        (rr, cc) for rr, cc in candidates
        if 1 <= rr <= config.rows and 1 <= cc <= config.cols
    ]


def adjacency_list(config):
    """Neighbour zone indices per zone; zone index is ``(r-1)*cols + (c-1)``."""
    out = []
    for r in range(1, config.rows + 1):
        for c in range(1, config.cols + 1):
            out.append([(rr - 1) * config.cols + (cc - 1) for rr, cc in hex_neighbors(r, c, config)])
    return out


# -- panels ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DayPanel:
    """One day of a panel; arrays have shape ``(rows, cols, T)``."""

    demand: np.ndarray
    supply: np.ndarray
    matches: np.ndarray | None = None
    pickups: np.ndarray | None = None
    label: str = ""

    @property
    def shape(self):
        return self.demand.shape

    @property
    def n_zones(self):
        return self.shape[0] * self.shape[1]

    def flat(self, name):
        a = getattr(self, name)
        return None if a is None else a.reshape(self.n_zones, self.shape[2])

    def inputs(self, supply=None):
        """Model inputs ``[r, c, t, d, s]`` ordered by (r, c, t)."""
        rows, cols, T = self.shape
        supply = self.supply if supply is None else np.asarray(supply, dtype=float).reshape(self.shape)
        r, c, t = np.meshgrid(
            np.arange(1, rows + 1), np.arange(1, cols + 1), np.arange(1, T + 1), indexing="ij"
        )
        return np.column_stack([
            r.ravel(), c.ravel(), t.ravel(), self.demand.ravel(), supply.ravel()
        ]).astype(float)

    def with_supply(self, supply):
        return DayPanel(self.demand, np.asarray(supply, dtype=float).reshape(self.shape),
                        self.matches, self.pickups, self.label)


@dataclass(frozen=True, eq=False)
class ObservationGrid:
    """Panel over several days; value arrays have shape ``(days, rows, cols, T)``."""

    days: tuple
    demand: np.ndarray
    supply: np.ndarray
    matches: np.ndarray
    pickups: np.ndarray
    config: GridConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "days", tuple(str(d) for d in self.days))
        shape = None
        for name in FIELDS:
            a = np.array(getattr(self, name), dtype=float)
            if a.ndim != 4:
                raise PanelFormatError(f"{name} must be 4-dimensional, got {a.shape}")
            if shape is None:
                shape = a.shape
            elif a.shape != shape:
                raise PanelFormatError(f"{name} has shape {a.shape}, expected {shape}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if shape[0] != len(self.days):
            raise PanelFormatError(f"{len(self.days)} day labels for {shape[0]} days of data")
        if len(set(self.days)) != len(self.days):
            raise PanelFormatError("duplicate day labels")

    @property
    def rows(self):
        return self.demand.shape[1]

    @property
    def cols(self):
        return self.demand.shape[2]

    @property
    def intervals(self):
        return self.demand.shape[3]

    @property
    def n_days(self):
        return len(self.days)

    def grid_config(self):
        if self.config is not None:
            return self.config
        return GridConfig(rows=self.rows, cols=self.cols,
                          horizon=("00:00:00", _clock(self.intervals * 180)))

    def adjacency(self):
        return adjacency_list(self.grid_config())

    def day(self, i):
        if isinstance(i, str):
            i = self.days.index(i)
        return DayPanel(self.demand[i], self.supply[i], self.matches[i], self.pickups[i], self.days[i])

    def select(self, indices):
        idx = list(indices)
        return ObservationGrid(
            tuple(self.days[i] for i in idx),
            *(getattr(self, f)[idx] for f in FIELDS),
            config=self.config,
        )

    def inputs(self, indices=None):
        idx = range(self.n_days) if indices is None else indices
        return np.vstack([self.day(i).inputs() for i in idx])

    def target(self, name, indices=None):
        if name not in ("matches", "pickups"):
            raise ValueError(f"unknown target {name!r}")
        idx = range(self.n_days) if indices is None else indices
        return np.concatenate([getattr(self, name)[i].ravel() for i in idx])

    def day_arrays(self, indices=None):
        """(demand, supply, matches) per day, each ``(Z, T)``."""
        idx = range(self.n_days) if indices is None else indices
        out = []
        for i in idx:
            p = self.day(i)
            out.append((p.flat("demand"), p.flat("supply"), p.flat("matches")))
        return out

    def equals(self, other):
        return (
            self.days == other.days
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in FIELDS)
        )


def _clock(seconds):
    seconds = min(int(seconds), 86399)
    return f"{seconds // 3600:02d}:{seconds % 3600 // 60:02d}:{seconds % 60:02d}"


def save_grid(grid, path):
    """Write the panel CSV sorted by (day, r, c, t)."""
    order = sorted(range(grid.n_days), key=lambda i: grid.days[i])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_COLUMNS)
        for i in order:
            for r in range(grid.rows):
                for c in range(grid.cols):
                    for t in range(grid.intervals):
                        w.writerow([grid.days[i], r + 1, c + 1, t + 1] + [
                            _num(getattr(grid, f)[i, r, c, t]) for f in FIELDS
                        ])


def load_grid(path, config=None):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in PANEL_COLUMNS if c not in header]
        if missing:
            raise PanelFormatError(f"{path}: missing column(s): {', '.join(missing)}")
        pos = {c: header.index(c) for c in PANEL_COLUMNS}
        data = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                key = (row[pos["day"]].strip(),
                       int(row[pos["r"]]), int(row[pos["c"]]), int(row[pos["t"]]))
                values = [float(row[pos[f]]) for f in FIELDS]
            except (ValueError, IndexError):
                raise PanelFormatError(f"{path}:{lineno}: non-numeric or missing cell") from None
            if key in data:
                raise PanelFormatError(f"{path}:{lineno}: duplicate row for key day={key[0]} r={key[1]} c={key[2]} t={key[3]}")
            if min(key[1:]) < 1:
                raise PanelFormatError(f"{path}:{lineno}: indices start at 1")
            data[key] = values
    if not data:
        raise PanelFormatError(f"{path}: no data rows")
    days = sorted({k[0] for k in data})
    rows = max(k[1] for k in data)
    cols = max(k[2] for k in data)
    T = max(k[3] for k in data)
    expected = rows * cols * T
    arr = np.zeros((len(FIELDS), len(days), rows, cols, T))
    for di, d in enumerate(days):
        n = sum(1 for k in data if k[0] == d)
        if n != expected:
            raise PanelFormatError(
                f"{path}: day {d} has {n} rows, expected {rows}x{cols}x{T} = {expected}"
            )
    for (d, r, c, t), values in data.items():
        arr[:, days.index(d), r - 1, c - 1, t - 1] = values
    return ObservationGrid(tuple(days), *arr, config=config)


# -- order records and aggregation ----------------------------------------------

@dataclass(frozen=True)
class OrderRecord:
    create_time: datetime | None
    match_time: datetime | None
    pickup_time: datetime | None
    finish_time: datetime | None
    origin_lat: float
    origin_lon: float
    dest_lat: float
    dest_lon: float
    dispatch_lat: float | None = None
    dispatch_lon: float | None = None

    def ordering_violation(self):
        stamps = [self.create_time, self.match_time, self.pickup_time, self.finish_time]
        names = ["create", "match", "pickup", "finish"]
        present = [(n, s) for n, s in zip(names, stamps) if s is not None]
        for (n1, s1), (n2, s2) in zip(present, present[1:]):
            if s1 > s2:
                return f"{n1}_time after {n2}_time"
        return None


def _parse_ts(text):
    text = text.strip()
    return datetime.fromisoformat(text) if text else None


def read_orders(path):
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ORDER_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise PanelFormatError(f"{path}: missing column(s): {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(OrderRecord(
                    *(_parse_ts(row[c]) for c in ORDER_COLUMNS[:4]),
                    *(float(row[c]) for c in ORDER_COLUMNS[4:]),
                ))
            except ValueError as exc:
                raise PanelFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def _fmt_ts(ts):
    return "" if ts is None else ts.isoformat(timespec="seconds")


def write_orders(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ORDER_COLUMNS)
        for rec in records:
            w.writerow([_fmt_ts(rec.create_time), _fmt_ts(rec.match_time),
                        _fmt_ts(rec.pickup_time), _fmt_ts(rec.finish_time),
                        _num(rec.origin_lat), _num(rec.origin_lon),
                        _num(rec.dest_lat), _num(rec.dest_lon)])


@dataclass
class AggregationReport:
    counted: dict = field(default_factory=lambda: {f: 0 for f in FIELDS})
    out_of_grid: dict = field(default_factory=lambda: {f: 0 for f in FIELDS})
    out_of_horizon: dict = field(default_factory=lambda: {f: 0 for f in FIELDS})
    malformed: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


# which timestamp and which end of the trip each panel field counts
EVENT_RULES = {
    "demand": ("create_time", "origin"),
    "supply": ("finish_time", "dest"),
    "matches": ("match_time", "origin"),
    "pickups": ("pickup_time", "origin"),
}


def _slot(ts, config):
    day_start = datetime.combine(ts.date(), config.start_time)
    secs = (ts - day_start).total_seconds()
    if secs < 0 or secs >= config.horizon_seconds:
        return None
    return ts.date().isoformat(), int(secs // config.interval_s)


def aggregate_orders(records, config):
    """Count events into a panel; returns ``(grid, report)``.

    Each event (creation, finish, match, pickup) increments exactly one
    cell.  Events outside the grid or horizon are tallied in the report;
    records with inconsistent timestamps are skipped and listed.
    """
    events = []
    report = AggregationReport()
    for i, rec in enumerate(records):
        problem = rec.ordering_violation()
        if problem:
            report.malformed.append({"index": i, "reason": problem})
            continue
        for name, (stamp, end) in EVENT_RULES.items():
            ts = getattr(rec, stamp)
            if ts is None:
                continue
            slot = _slot(ts, config)
            if slot is None or (config.days is not None and slot[0] not in config.days):
                report.out_of_horizon[name] += 1
                continue
            zone = hex_zone_of(getattr(rec, f"{end}_lat"), getattr(rec, f"{end}_lon"), config)
            if zone is None:
                report.out_of_grid[name] += 1
                continue
            events.append((name, slot[0], zone[0], zone[1], slot[1]))
    days = config.days if config.days is not None else tuple(sorted({e[1] for e in events}))
    arr = np.zeros((len(FIELDS), len(days), config.rows, config.cols, config.intervals))
    day_pos = {d: k for k, d in enumerate(days)}
    field_pos = {f: k for k, f in enumerate(FIELDS)}
    for name, d, r, c, t in events:
        arr[field_pos[name], day_pos[d], r - 1, c - 1, t] += 1.0
        report.counted[name] += 1
    return ObservationGrid(tuple(days), *arr, config=config), report


# -- synthetic markets ------------------------------------------------------------

@dataclass
class MarketSpec:
    """Recipe for a synthetic market.

    ``generator`` picks the ground-truth model for matches/pickups: ``agpm``
    (a GP draw with ``kernel``/``theta``), ``cdmf`` or ``spmq``.
    ``noise_var=None`` uses the theta noise slot for ``agpm`` and 1.0 otherwise.
    ``hot_zones`` entries are ``[r, c, demand_factor, supply_factor]``.
    """

    generator: str = "agpm"
    rows: int = 4
    cols: int = 4
    intervals: int = 20
    n_days: int = 5
    start_date: str = "2018-12-03"
    horizon_start: str = "07:30:00"
    interval_s: int = 180
    kernel: str = "AGPM5"
    theta: list | None = None
    pickup_theta: list | None = None
    cdmf: tuple = (1.2, 0.6, 0.4)
    cdmf_pickup: tuple = (0.9, 0.6, 0.3)
    spmq: tuple = (0.8, 0.3)
    noise_var: float | None = None
    demand_base: float = 2.0
    demand_peak: float = 30.0
    supply_base: float = 2.0
    supply_peak: float = 25.0
    n_bumps: int = 3
    day_jitter: float = 0.15
    hot_zones: list = field(default_factory=list)
    round_counts: bool = True
    truncate: bool = True
    inputs_seed: int | None = None

    def grid_config(self):
        start = datetime.combine(date.fromisoformat(self.start_date), time.fromisoformat(self.horizon_start))
        end = start + timedelta(seconds=self.intervals * self.interval_s)
        days = tuple((start.date() + timedelta(days=k)).isoformat() for k in range(self.n_days))
        return GridConfig(
            rows=self.rows, cols=self.cols, interval_s=self.interval_s,
            horizon=(start.time().isoformat(), end.time().isoformat()), days=days,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SyntheticMarket:
    grid: ObservationGrid
    records: list | None
    truth: dict
    config: GridConfig


def sample_latent(expr, theta, X, rng, size=None):
    """Draw latent GP values ``f(X)`` (noise excluded) with the jitter ladder."""
    K = gram_matrix(expr, theta, X)
    L, _ = factorize(K)
    shape = (X.shape[0],) if size is None else (X.shape[0], size)
    return L @ rng.standard_normal(shape)


def _surface(rng, rows, cols, T, base, peak, n_bumps):
    r, c, t = np.meshgrid(np.arange(1, rows + 1), np.arange(1, cols + 1),
                          np.arange(1, T + 1), indexing="ij")
    lam = np.full(r.shape, float(base))
    for _ in range(n_bumps):
        rk, ck, tk = rng.uniform(1, rows), rng.uniform(1, cols), rng.uniform(1, T)
        ws, wt = rng.uniform(0.8, 2.0), rng.uniform(T / 6, T / 2)
        amp = rng.uniform(0.5, 1.0) * peak
        lam += amp * np.exp(-((r - rk) ** 2 + (c - ck) ** 2) / (2 * ws**2) - (t - tk) ** 2 / (2 * wt**2))
    return lam


def _finish(y, spec):
    if spec.truncate:
        y = np.maximum(y, 0.0)
    if spec.round_counts:
        y = np.round(y) + 0.0
    return y


def synthesize_market(seed, spec=None):
    """Seeded synthetic panel plus order records that aggregate back to it.

    Demand and supply are Poisson draws from smooth intensity surfaces (sums
    of Gaussian bumps over zone and time, scaled per day).  Matches and
    pickups come from the named ground-truth model plus Gaussian noise,
    truncated at zero and rounded to whole counts when requested.  Records
    are only produced for whole, non-negative counts.
    """
    spec = spec or MarketSpec()
    if spec.generator not in ("agpm", "cdmf", "spmq"):
        raise ValueError(f"unknown generator {spec.generator!r}")
    config = spec.grid_config()
    D, R, C, T = spec.n_days, spec.rows, spec.cols, spec.intervals
    in_rng = np.random.default_rng([spec.inputs_seed if spec.inputs_seed is not None else seed, 0])
    out_rng = np.random.default_rng([seed, 1])

    lam_d = _surface(in_rng, R, C, T, spec.demand_base, spec.demand_peak, spec.n_bumps)
    lam_s = _surface(in_rng, R, C, T, spec.supply_base, spec.supply_peak, spec.n_bumps)
    for r, c, dfac, sfac in spec.hot_zones:
        lam_d[int(r) - 1, int(c) - 1] *= dfac
        lam_s[int(r) - 1, int(c) - 1] *= sfac
    scale = in_rng.uniform(1 - spec.day_jitter, 1 + spec.day_jitter, size=(D, 2))
    demand = np.stack([in_rng.poisson(lam_d * scale[k, 0]) for k in range(D)]).astype(float)
    supply = np.stack([in_rng.poisson(lam_s * scale[k, 1]) for k in range(D)]).astype(float)

    truth = {"generator": spec.generator, "spec": spec.to_dict(), "seed": seed}
    zeros = np.zeros_like(demand)
    if spec.generator == "agpm":
        expr = parse_kernel_spec(spec.kernel)
        theta = np.asarray(spec.theta if spec.theta is not None else preset_theta("matching"), dtype=float)
        ptheta = np.asarray(
            spec.pickup_theta if spec.pickup_theta is not None else preset_theta("pickup"), dtype=float
        )
        noise = theta[-1] if spec.noise_var is None else spec.noise_var
        pnoise = ptheta[-1] if spec.noise_var is None else spec.noise_var
        grid0 = ObservationGrid(config.days, demand, supply, zeros, zeros, config)
        X = grid0.inputs()
        fm = sample_latent(expr, theta, X, out_rng)
        fp = sample_latent(expr, ptheta, X, out_rng)
        ym = fm + np.sqrt(noise) * out_rng.standard_normal(fm.shape)
        yp = fp + np.sqrt(pnoise) * out_rng.standard_normal(fp.shape)
        matches = ym.reshape(demand.shape)
        pickups = yp.reshape(demand.shape)
        truth.update(kernel_spec=str(expr), theta=theta.tolist(), pickup_theta=ptheta.tolist(),
                     noise_var=float(noise))
    elif spec.generator == "cdmf":
        pm, pp = CDMFParams(*spec.cdmf), CDMFParams(*spec.cdmf_pickup)
        noise = 1.0 if spec.noise_var is None else spec.noise_var
        matches = cdmf_predict(demand, supply, pm) + np.sqrt(noise) * out_rng.standard_normal(demand.shape)
        pickups = cdmf_predict(demand, supply, pp) + np.sqrt(noise) * out_rng.standard_normal(demand.shape)
        truth.update(cdmf=list(spec.cdmf), cdmf_pickup=list(spec.cdmf_pickup), noise_var=float(noise))
    else:
        params = SPMQParams(*spec.spmq)
        adj = adjacency_list(config)
        noise = 1.0 if spec.noise_var is None else spec.noise_var
        matches = np.stack([
            spmq_predict(demand[k].reshape(R * C, T), supply[k].reshape(R * C, T), params, adj).reshape(R, C, T)
            for k in range(D)
        ]) + np.sqrt(noise) * out_rng.standard_normal(demand.shape)
        pickups = zeros.copy()
        truth.update(spmq=list(spec.spmq), noise_var=float(noise))

    matches, pickups = _finish(matches, spec), _finish(pickups, spec)
    grid = ObservationGrid(config.days, demand, supply, matches, pickups, config)
    whole = all(
        np.all(a >= 0) and np.array_equal(a, np.round(a)) for a in (matches, pickups)
    )
    records = panel_to_records(grid, config) if whole else None
    return SyntheticMarket(grid, records, truth, config)


def panel_to_records(grid, config):
    """Order records whose aggregation reproduces ``grid`` exactly.

    Every counted unit becomes one order whose other timestamps fall just
    outside the horizon, so it contributes to exactly one panel field.
    """
    if config.start_time < time(0, 5) or config.end_time > time(23, 55):
        raise ValueError("horizon must leave five minutes of slack around midnight")
    records = []
    half = config.interval_s // 2
    for k, day in enumerate(grid.days):
        start = datetime.combine(date.fromisoformat(day), config.start_time)
        end = start + timedelta(seconds=config.horizon_seconds)
        before = [start - timedelta(seconds=s) for s in (180, 120, 60)]
        after = [end + timedelta(seconds=s) for s in (60, 120, 180)]
        for r in range(grid.rows):
            for c in range(grid.cols):
                lat, lon = hex_center(r + 1, c + 1, config)
                for t in range(grid.intervals):
                    mid = start + timedelta(seconds=t * config.interval_s + half)
                    n = {f: int(getattr(grid, f)[k, r, c, t]) for f in FIELDS}
                    records += [OrderRecord(mid, *after, lat, lon, lat, lon)] * n["demand"]
                    records += [OrderRecord(*before, mid, lat, lon, lat, lon)] * n["supply"]
                    records += [OrderRecord(before[2], mid, after[0], after[1], lat, lon, lat, lon)] * n["matches"]
                    records += [OrderRecord(before[1], before[2], mid, after[0], lat, lon, lat, lon)] * n["pickups"]
    return records
