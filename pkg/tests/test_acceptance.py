"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line; the lines are printed as they are
produced and repeated in the pytest terminal summary.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import central_difference, random_inputs
from ridegp.baselines import CDMFParams, SPMQParams, cdmf_predict, fit_cdmf, fit_spmq, pmq_predict, spmq_predict
from ridegp.cli import main as cli_main
from ridegp.gp import fit_cache, lml_gradient, log_marginal_likelihood, predict, predictive_mean_gradients
from ridegp.harness import cross_validate, fit_model
from ridegp.kernels import KernelExpr, eval_base, grad_theta, gram_matrix, parse_kernel_spec
from ridegp.market import MarketSpec, adjacency_list, synthesize_market
from ridegp.strategy import StrategyConfig, apply_relocation, evaluate_strategy, queue_lengths, select_targets
from ridegp.training import TrainConfig, preset_theta

FIXTURE = Path(__file__).parent / "data" / "strategy_fixture.json"
RESULTS = []


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def rel(a, b):
    return abs(a - b) / abs(b)


# scalar oracles written straight from the kernel definitions
def oracle(family, params, a, b):
    if family == "SE":
        return math.exp(-sum((x - y) ** 2 for x, y in zip(a, b)) / (2 * params[0] ** 2))
    if family == "OU":
        return math.exp(-math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))) / params[0])
    if family == "PE":
        return math.exp(-2 * math.sin((a[0] - b[0]) / params[1]) ** 2 / params[0] ** 2)
    if family == "CA":
        return 1.0 if list(a) == list(b) else 0.0
    return 1.0 if a[0] == b[0] == 1 else 0.0


def test_criterion_1_kernels():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for family in ("SE", "OU", "PE", "CA", "BI"):
        for _ in range(100):
            dim = 1 if family in ("PE", "BI") else int(rng.integers(1, 4))
            params = list(rng.uniform(0.2, 10.0, {"SE": 1, "OU": 1, "PE": 2}.get(family, 0)))
            if family in ("CA", "BI"):
                a = rng.integers(0, 3, dim).astype(float)
                b = rng.integers(0, 3, dim).astype(float)
            else:
                a, b = rng.uniform(-10, 10, dim), rng.uniform(-10, 10, dim)
            got, want = eval_base(family, params, a, b), oracle(family, params, a, b)
            err = abs(got - want) / abs(want) if want != 0 else abs(got)
            worst = max(worst, err)

    additivity = 0.0
    for _ in range(20):
        e = parse_kernel_spec("SE(r,c)*PE(t)*OU(d) + SE(s)*CA(t) + OU(r,c)*SE(d,s)")
        th = rng.uniform(0.3, 5.0, e.n_theta)
        X = random_inputs(rng, 12)
        parts, k = [], 0
        for term in e.terms:
            width = 1 + sum({"SE": 1, "OU": 1, "PE": 2}.get(f.family, 0) for f in term.factors)
            parts.append(gram_matrix(KernelExpr((term,)), np.r_[th[k:k + width], 1.0], X))
            k += width
        additivity = max(additivity, np.max(np.abs(gram_matrix(e, th, X) - sum(parts))))

    psd_ok = True
    for spec in ("AGPM1", "AGPM2", "AGPM3", "AGPM4", "AGPM5", "AGPM5:OU", "AGPM5:PE"):
        e = parse_kernel_spec(spec)
        K = gram_matrix(e, rng.uniform(0.3, 10.0, e.n_theta), random_inputs(rng, 50))
        try:
            np.linalg.cholesky(K + 1e-8 * np.eye(50))
        except np.linalg.LinAlgError:
            psd_ok = False
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and additivity <= 1e-12 and psd_ok and elapsed < 5.0
    record(1, "kernel formulas, additivity, PSD", ok,
           f"max rel err {worst:.1e} < 1e-12, additivity {additivity:.1e} <= 1e-12, "
           f"cholesky {'ok' if psd_ok else 'failed'}, {elapsed:.2f}s < 5s")


def test_criterion_2_gradients():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    specs = ["AGPM5", "AGPM3", "SE(r,c)*PE(t)*OU(d) + SE(s)", "AGPM2", "SE(r,c,t)*OU(d,s)"]
    worst = {"dK": 0.0, "dL": 0.0, "dmu": 0.0}
    n_instances = 0
    for i in range(20):
        e = parse_kernel_spec(specs[i % len(specs)])
        n = int(rng.integers(5, 31))
        X = random_inputs(rng, n)
        Y = rng.normal(0, 3, n)
        th = rng.uniform(0.5, 5.0, e.n_theta)

        def full(t):
            return gram_matrix(e, t, X) + t[-1] * np.eye(n)

        for j, dK in enumerate(grad_theta(e, th, X)):
            fd = central_difference(full, th, j, 1e-6 * th[j])
            worst["dK"] = max(worst["dK"], np.linalg.norm(dK - fd) / np.linalg.norm(fd))

        g = lml_gradient(e, th, X, Y)
        fd = np.array([central_difference(lambda t: log_marginal_likelihood(e, t, X, Y), th, j, 1e-6 * th[j])
                       for j in range(e.n_theta)])
        worst["dL"] = max(worst["dL"], np.linalg.norm(g - fd) / np.linalg.norm(fd))

        model = fit_cache(e, th, X, Y)
        xs = random_inputs(rng, 5) + 0.37
        dim = 4 if e.uses_dim(4) else 3
        gm = predictive_mean_gradients(model, xs, dim)
        fd = np.array([central_difference(lambda x: predict(model, x).mean[0], xs[k], dim, 1e-5) for k in range(5)])
        worst["dmu"] = max(worst["dmu"], np.linalg.norm(gm - fd) / np.linalg.norm(fd))
        n_instances += 1
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and n_instances >= 20 and elapsed < 30.0
    record(2, "dK/dtheta, dL/dtheta, d mean/dx vs central differences", ok,
           f"{n_instances} instances n<=30, max rel err dK {worst['dK']:.1e}, dL {worst['dL']:.1e}, "
           f"dmu {worst['dmu']:.1e} < 1e-4, {elapsed:.2f}s < 30s")


def test_criterion_3_exact_inference():
    se = parse_kernel_spec("SE(t)")
    X = np.zeros((1, 5))
    xs = np.zeros((1, 5))
    xs[0, 2] = 1.0
    # noise 1e-300 is exactly zero next to a unit prior variance
    d = predict(fit_cache(se, [1.0, 1.0, 1e-300], X, [2.0]), xs)
    mean_err = abs(d.mean[0] - 2 * math.exp(-0.5))
    var_err = abs(d.variance[0] - (1 - math.exp(-1)))

    rng = np.random.default_rng(3)
    e = parse_kernel_spec("AGPM5")
    lml_err = 0.0
    for _ in range(10):
        th = rng.uniform(0.5, 5.0, e.n_theta)
        X2 = random_inputs(rng, 2)
        y = rng.normal(0, 2, 2)
        C = gram_matrix(e, th, X2) + th[-1] * np.eye(2)
        det = C[0, 0] * C[1, 1] - C[0, 1] ** 2
        quad = (C[1, 1] * y[0] ** 2 - 2 * C[0, 1] * y[0] * y[1] + C[0, 0] * y[1] ** 2) / det
        density = math.exp(-0.5 * quad) / (2 * math.pi * math.sqrt(det))
        lml_err = max(lml_err, abs(math.exp(log_marginal_likelihood(e, th, X2, y)) - density))

    th = preset_theta("matching").copy()
    th[-1] = 1e-10
    Xn = random_inputs(rng, 30)
    Yn = rng.normal(0, 3, 30)
    interp = np.max(np.abs(predict(fit_cache(e, th, Xn, Yn), Xn).mean - Yn))
    ok = mean_err < 1e-10 and var_err < 1e-10 and lml_err < 1e-10 and interp < 1e-4
    record(3, "closed-form prediction, bivariate likelihood, interpolation", ok,
           f"mean err {mean_err:.1e}, var err {var_err:.1e}, density err {lml_err:.1e} < 1e-10; "
           f"interpolation err {interp:.1e} < 1e-4")


def test_criterion_4_synthetic_recovery():
    start = time.perf_counter()
    spec = MarketSpec(generator="agpm", rows=4, cols=4, intervals=20, n_days=5,
                      theta=list(preset_theta("matching")), noise_var=0.5, truncate=False, round_counts=False)
    grid = synthesize_market(7, spec).grid
    cfg = TrainConfig(restarts=1, max_iters=30, init="preset-vector", preset="matching")
    agpm = cross_validate(grid, "agpm", {"kernel": "AGPM5", "train_config": cfg})
    cdmf = cross_validate(grid, "cdmf")
    elapsed = time.perf_counter() - start
    r2, r2_cdmf = agpm.averaged["r2"], cdmf.averaged["r2"]
    ok = r2 > 0.8 and r2 > r2_cdmf and elapsed < 600
    record(4, "AGPM-5 held-out recovery on a 5-day 4x4x20 AGPM panel", ok,
           f"averaged R2 {r2:.4f} > 0.8, CDMF R2 {r2_cdmf:.4f} < AGPM R2, {elapsed:.0f}s < 600s")


def test_criterion_5_baselines():
    rng = np.random.default_rng(5)
    d = rng.poisson(8.0, 500).astype(float)
    s = rng.poisson(6.0, 500).astype(float)
    fit = fit_cdmf(d, s, cdmf_predict(d, s, CDMFParams(1.2, 0.6, 0.4)))
    cdmf_err = max(rel(fit.A, 1.2), rel(fit.alpha, 0.6), rel(fit.beta, 0.4))

    spec = MarketSpec(generator="spmq", rows=4, cols=4, intervals=20, n_days=3, noise_var=0.0, round_counts=False)
    grid = synthesize_market(5, spec).grid
    adj = grid.adjacency()
    sp = fit_spmq(grid, adj)
    spmq_err = max(abs(sp.a - 0.8), abs(sp.b - 0.3))

    bitwise = all(
        np.array_equal(spmq_predict(dd, ss, SPMQParams(1.0, 0.0), adj), pmq_predict(dd, ss))
        for dd, ss, _ in grid.day_arrays()
    )
    ok = cdmf_err < 0.01 and spmq_err <= 0.05 and bitwise
    record(5, "CDMF and SPMQ parameter recovery, SPMQ(1,0) == PMQ", ok,
           f"CDMF max rel err {cdmf_err:.1e} < 1%, SPMQ (a, b) = ({sp.a:.4f}, {sp.b:.4f}) "
           f"within {spmq_err:.4f} <= 0.05, bitwise {'equal' if bitwise else 'different'}")


def brute_force_queue(demand, matches, q0):
    Z, T = len(demand), len(demand[0])
    q = [[0.0] * T for _ in range(Z)]
    for z in range(Z):
        running = q0[z]
        for t in range(T):
            running = running + (demand[z][t] - matches[z][t])
            q[z][t] = running
    total = 0.0
    for z in range(Z):
        zone = 0.0
        for t in range(T):
            zone += q[z][t]
        total += zone
    return q, total


def test_criterion_6_queue_oracle():
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(50):
        Z, T = int(rng.integers(1, 37)), int(rng.integers(1, 41))
        d = rng.uniform(0, 30, (Z, T))
        m = rng.uniform(0, 30, (Z, T))
        q0 = rng.uniform(0, 10, Z)
        rep = queue_lengths(d, m, q0)
        q, total = brute_force_queue(d.tolist(), m.tolist(), q0.tolist())
        if not (np.array_equal(rep.q, np.array(q)) and rep.Q_total == total):
            mismatches += 1
    record(6, "queue recursion vs step-by-step simulator", mismatches == 0,
           f"{50 - mismatches}/50 random panels identical bit for bit")


def test_criterion_7_strategy_fixture():
    fx = json.loads(FIXTURE.read_text())
    market = synthesize_market(fx["seed"], MarketSpec.from_dict(fx["spec"]))
    model = fit_model(market.grid, "agpm", "matches", theta=fx["theta"]).gp
    adj = adjacency_list(market.config)
    panel = market.grid.day(fx["day"])
    cfg = StrategyConfig()
    results = {k: evaluate_strategy(model, panel, None, k, cfg, adj) for k in ("QS", "GS", "CS")}
    gs = results["GS"]

    frozen_ok = all(
        rel(results[k].Q_before, v["Q_before"]) < 1e-9 and rel(results[k].Q_after, v["Q_after"]) < 1e-9
        and int(results[k].targets.sum()) == v["n_targets"] and len(results[k].plan.transfers) == v["n_transfers"]
        for k, v in fx["frozen"].items()
    )
    conservation = max(
        np.max(np.abs(r.plan.revised_supply.sum(axis=0) - panel.flat("supply").sum(axis=0))) for r in results.values()
    )

    # thresholds placed exactly on an observed metric exclude that zone
    G, Q = gs.gradient.per_window, gs.before.per_window_Q
    z, w = np.unravel_index(np.argmax(G), G.shape)
    at_gs = select_targets("GS", gs.before, gs.gradient, StrategyConfig(gs_threshold=G[z, w]))
    zq, wq = np.unravel_index(np.argmax(Q), Q.shape)
    at_qs = select_targets("QS", gs.before, gs.gradient, StrategyConfig(qs_threshold=Q[zq, wq]))
    at_cs = select_targets("CS", gs.before, gs.gradient, StrategyConfig(cs_threshold=Q[zq, wq] * G[zq, wq]))
    strict = not at_gs[z, w] and not at_qs[zq, wq] and not at_cs[zq, wq]

    # band donors: adjacent to a GS target with window gradient in [1.0, 1.2]
    band = [(d, k) for k in range(G.shape[1]) for d in range(G.shape[0])
            if 1.0 <= G[d, k] <= 1.2 and not gs.targets[d, k] and any(gs.targets[j, k] for j in adj[d])]
    gs_donors = {(t["donor"], t["window"]) for t in gs.plan.transfers}
    _, as_qs = apply_relocation(panel.flat("supply"), gs.targets, adj, cfg, "QS")
    qs_donors = {(t["donor"], t["window"]) for t in as_qs.transfers}
    band_ok = bool(band) and all(b not in gs_donors and b in qs_donors for b in band)

    improves = gs.Q_after < gs.Q_before
    ok = improves and conservation <= 1e-9 and strict and band_ok and frozen_ok
    record(7, "strategy fixture", ok,
           f"GS Q {gs.Q_before:.3f} -> {gs.Q_after:.3f}, supply drift {conservation:.1e} <= 1e-9, "
           f"strict thresholds {'ok' if strict else 'violated'}, band donors {band} suppressed "
           f"{'ok' if band_ok else 'violated'}, frozen values {'match' if frozen_ok else 'differ'}")


def _run_twice(tmp_path, name, argv_for):
    """Run a CLI command into two directories; return whether outputs are byte-identical."""
    outs = []
    for k in ("a", "b"):
        d = tmp_path / name / k
        d.mkdir(parents=True)
        assert cli_main([str(a) for a in argv_for(d)]) == 0, name
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    return outs[0] == outs[1]


def test_criterion_8_pipeline_closure(tmp_path):
    gen = tmp_path / "gen"
    small = ["--rows", 4, "--cols", 4, "--intervals", 10, "--n-days", 3]
    assert cli_main([str(a) for a in ["generate", "--seed", 11, "--out-dir", gen, *small]]) == 0
    agg = tmp_path / "agg.csv"
    assert cli_main([str(a) for a in ["aggregate", "--orders", gen / "orders.csv",
                                      "--config", gen / "grid_config.json", "--out", agg]]) == 0
    closure = agg.read_bytes() == (gen / "panel.csv").read_bytes()

    panel = gen / "panel.csv"
    model = tmp_path / "model.json"
    cli_main([str(a) for a in ["train", "--panel", panel, "--out", model, "--restarts", 2, "--max-iters", 5,
                               "--seed", 3]])
    commands = {
        "generate": lambda d: ["generate", "--seed", 11, "--out-dir", d, *small],
        "aggregate": lambda d: ["aggregate", "--orders", gen / "orders.csv", "--config", gen / "grid_config.json",
                                "--out", d / "panel.csv", "--report", d / "report.json"],
        "train": lambda d: ["train", "--panel", panel, "--out", d / "m.json", "--report", d / "r.json",
                            "--restarts", 2, "--max-iters", 5, "--seed", 3],
        "predict": lambda d: ["predict", "--model", model, "--panel", panel, "--out", d / "p.csv"],
        "evaluate": lambda d: ["evaluate", "--panel", panel, "--out", d / "e.json", "--scatter", d / "s.csv",
                               "--model", "spmq"],
        "strategize": lambda d: ["strategize", "--model", model, "--panel", panel, "--strategy", "GS",
                                 "--gs-threshold", 0.05, "--band-low", 0.01, "--band-high", 0.02,
                                 "--out", d / "s.json", "--metrics", d / "s.csv"],
    }
    deterministic = {name: _run_twice(tmp_path, name, argv) for name, argv in commands.items()}
    ok = closure and all(deterministic.values())
    bad = [n for n, v in deterministic.items() if not v]
    record(8, "generate -> aggregate closure and byte-deterministic CLI", ok,
           f"aggregated panel {'identical' if closure else 'differs'}; "
           f"{len(deterministic) - len(bad)}/{len(deterministic)} subcommands byte-identical"
           + (f", differing: {', '.join(bad)}" if bad else ""))


@pytest.mark.slow
def test_full_profile_agpm_vs_cdmf():
    """Full 6x6x40x5 profile with the fitted matching vector held fixed."""
    spec = MarketSpec(generator="agpm", rows=6, cols=6, intervals=40, n_days=5,
                      theta=list(preset_theta("matching")), noise_var=0.5, truncate=False, round_counts=False)
    grid = synthesize_market(7, spec).grid
    agpm = cross_validate(grid, "agpm", {"kernel": "AGPM5", "theta": preset_theta("matching")})
    cdmf = cross_validate(grid, "cdmf")
    print(f"full profile: AGPM-5 R2 {agpm.averaged['r2']:.4f}, CDMF R2 {cdmf.averaged['r2']:.4f}")
    assert agpm.averaged["r2"] > cdmf.averaged["r2"]
