"""Command-line pipeline: generate, aggregate, train, predict, evaluate, strategize."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .gp import predict
from .harness import (
    MODEL_KINDS,
    compute_metrics,
    cross_validate,
    emit_scatter,
    fit_model,
    load_fitted,
    save_fitted,
)
from .kernels import parse_kernel_spec
from .market import (
    GridConfig,
    MarketSpec,
    aggregate_orders,
    adjacency_list,
    load_grid,
    read_orders,
    save_grid,
    synthesize_market,
    write_orders,
)
from .strategy import KINDS, StrategyConfig, evaluate_strategy
from .training import PRESET_THETA, TrainConfig

log = logging.getLogger("ridegp")


class CLIError(Exception):
    pass


def _write_json(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _train_config(args):
    cfg = TrainConfig.load(args.train_config).to_dict() if args.train_config else TrainConfig().to_dict()
    for name in ("restarts", "max_iters", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    if getattr(args, "init_preset", None):
        cfg["init"] = "preset-vector"
        cfg["preset"] = args.init_preset
    return TrainConfig.from_dict(cfg)


def _model_options(args):
    opts = {}
    if args.model == "agpm":
        parse_kernel_spec(args.kernel)
        opts["kernel"] = args.kernel
        if args.theta:
            opts["theta"] = [float(v) for v in args.theta.split(",")]
        else:
            opts["train_config"] = _train_config(args)
    return opts


def cmd_generate(args):
    spec = MarketSpec.from_dict(json.load(open(args.spec))) if args.spec else MarketSpec()
    overrides = {k: getattr(args, k) for k in ("generator", "rows", "cols", "intervals", "n_days", "noise_var")
                 if getattr(args, k) is not None}
    spec = MarketSpec.from_dict({**spec.to_dict(), **overrides})
    market = synthesize_market(args.seed, spec)
    os.makedirs(args.out_dir, exist_ok=True)
    save_grid(market.grid, os.path.join(args.out_dir, "panel.csv"))
    market.config.save(os.path.join(args.out_dir, "grid_config.json"))
    _write_json(market.truth, os.path.join(args.out_dir, "truth.json"))
    if market.records is None:
        log.warning("fractional counts: no order records written")
    else:
        write_orders(market.records, os.path.join(args.out_dir, "orders.csv"))


def cmd_aggregate(args):
    config = GridConfig.load(args.config)
    grid, report = aggregate_orders(read_orders(args.orders), config)
    save_grid(grid, args.out)
    if args.report:
        _write_json(report.to_dict(), args.report)
    for rec in report.malformed:
        log.warning("skipped record %d: %s", rec["index"], rec["reason"])


def cmd_train(args):
    grid = load_grid(args.panel)
    model = fit_model(grid, args.model, args.target, **_model_options(args))
    save_fitted(model, args.out)
    if args.report:
        doc = model.report.to_dict() if model.report is not None else {"model_kind": args.model}
        _write_json(doc, args.report)


def cmd_predict(args):
    model = load_fitted(args.model)
    grid = load_grid(args.panel)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "r", "c", "t", "mean", "variance"])
        for i, day in enumerate(grid.days):
            panel = grid.day(i)
            X = panel.inputs()
            if model.kind == "agpm":
                dist = predict(model.gp, X, include_noise=args.include_noise)
                mean, var = dist.mean, dist.variance
            else:
                mean, var = model.predict_day(panel), np.full(X.shape[0], np.nan)
            for row, m, v in zip(X, mean, var):
                w.writerow([day, int(row[0]), int(row[1]), int(row[2]),
                            format(m, ".17g"), "" if np.isnan(v) else format(v, ".17g")])


def cmd_evaluate(args):
    grid = load_grid(args.panel)
    cv = cross_validate(grid, args.model, _model_options(args), args.target)
    _write_json(cv.to_dict(), args.out)
    if args.scatter:
        emit_scatter(cv.observed, cv.predicted, args.scatter)
    print(json.dumps(cv.averaged, sort_keys=True))


def _read_q0(path, rows, cols):
    q0 = np.zeros(rows * cols)
    if path:
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                q0[(int(row["r"]) - 1) * cols + int(row["c"]) - 1] = float(row["q0"])
    return q0


def cmd_strategize(args):
    model = load_fitted(args.model)
    if model.kind != "agpm":
        raise CLIError("strategies need a trained GP model (model_kind 'agpm')")
    grid = load_grid(args.panel)
    day = args.day if args.day is not None else grid.days[0]
    if day not in grid.days:
        raise CLIError(f"day {day!r} not in panel (days: {', '.join(grid.days)})")
    panel = grid.day(day)
    config = StrategyConfig(
        window_intervals=args.window, fraction=args.fraction,
        qs_threshold=args.qs_threshold, gs_threshold=args.gs_threshold,
        gs_no_donate_band=(args.band_low, args.band_high), cs_threshold=args.cs_threshold,
        clamp_queue=args.clamp_queue,
    )
    adj = adjacency_list(GridConfig(rows=grid.rows, cols=grid.cols))
    q0 = _read_q0(args.q0, grid.rows, grid.cols)
    result = evaluate_strategy(model.gp, panel, q0, args.strategy, config, adj)
    result.write(args.out, args.metrics, grid.cols)
    print(json.dumps({"kind": args.strategy, "Q_before": result.Q_before, "Q_after": result.Q_after}))


def _add_model_flags(p):
    p.add_argument("--model", choices=MODEL_KINDS, default="agpm", help="model family")
    p.add_argument("--kernel", default="AGPM5",
                   help="kernel spec, e.g. 'SE(r,c)*SE(t) + SE(d)' or a preset AGPM1..AGPM5")
    p.add_argument("--target", choices=("matches", "pickups"), default="matches")
    p.add_argument("--theta", help="comma-separated fixed theta; skips hyperparameter fitting")
    p.add_argument("--train-config", help="TrainConfig JSON file")
    p.add_argument("--restarts", type=int, help="optimizer restarts (overrides config)")
    p.add_argument("--max-iters", type=int, help="iterations per restart (overrides config)")
    p.add_argument("--init-preset", choices=sorted(PRESET_THETA),
                   help="start the first restart from a fitted AGPM-5 vector")
    p.add_argument("--seed", type=int, help="optimizer seed (overrides config)")


def build_parser():
    parser = argparse.ArgumentParser(prog="ridegp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a seeded market: orders, panel, truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".", help="directory for orders.csv, panel.csv, grid_config.json, truth.json")
    p.add_argument("--spec", help="MarketSpec JSON file")
    p.add_argument("--generator", choices=("agpm", "cdmf", "spmq"))
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--intervals", type=int)
    p.add_argument("--n-days", type=int)
    p.add_argument("--noise-var", type=float)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("aggregate", help="count order records into a panel CSV")
    p.add_argument("--orders", required=True)
    p.add_argument("--config", required=True, help="GridConfig JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write dropped/malformed-record accounting as JSON")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train", help="fit a model on every day of a panel")
    p.add_argument("--panel", required=True)
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--report", help="training report JSON")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict every cell of a panel")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--panel", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--include-noise", action="store_true", help="add the noise variance to GP variances")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="leave-one-day-out cross-validation")
    p.add_argument("--panel", required=True)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--scatter", help="observed/predicted CSV")
    _add_model_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("strategize", help="evaluate a relocation strategy on one day")
    p.add_argument("--model", required=True, help="trained GP model JSON")
    p.add_argument("--panel", required=True)
    p.add_argument("--day", help="day label (default: first day in the panel)")
    p.add_argument("--strategy", choices=KINDS, required=True)
    p.add_argument("--q0", help="CSV with columns r,c,q0 (default: empty queues)")
    p.add_argument("--out", required=True, help="strategy report JSON")
    p.add_argument("--metrics", required=True, help="per-zone per-window metrics CSV")
    p.add_argument("--window", type=int, default=10, help="intervals per window")
    p.add_argument("--fraction", type=float, default=0.10, help="share of donor supply moved")
    p.add_argument("--qs-threshold", type=float, default=100.0)
    p.add_argument("--gs-threshold", type=float, default=1.2)
    p.add_argument("--band-low", type=float, default=1.0, help="GS no-donate band lower edge")
    p.add_argument("--band-high", type=float, default=1.2, help="GS no-donate band upper edge")
    p.add_argument("--cs-threshold", type=float, default=100.0)
    p.add_argument("--clamp-queue", action="store_true", help="floor queues at zero each interval")
    p.set_defaults(func=cmd_strategize)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, ValueError, OSError, KeyError, np.linalg.LinAlgError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ridegp {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
