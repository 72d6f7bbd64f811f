"""Acceptance criteria 1-9, each reporting one PASS/FAIL line.

The heavier criteria (4-6) refit the model many times and take a few
minutes together; they are marked ``slow``.
"""

import json
import shutil
import time
from pathlib import Path
from dataclasses import replace

import numpy as np
import pytest

from stgamm.arma import PlotStructure, arma11_acf, simulate_arma11
from stgamm.cli import main
from stgamm.gamm_engine import WorkingModel, fit_gamm
from stgamm.grid_sim import (SimProtocol, build_universe, mpe_per_year, rmpe_percent, run_grid_examination,
                             simulate_response)
from stgamm.posterior_trend import Grid2, ObservedAge, Scenario, build_scenario_grid, trend, trend_point
from stgamm.smooth_basis import SmoothConfig, build_design
from stgamm.survey_data import (AgeStatus, TreeRecord, aggregate_plot, clamp_defoliation, midpoint_conversion,
                                plot_stand_age, weighted_median_age)
from stgamm.synthetic import SyntheticConfig, synthesize_plots

MID_SMOOTH = SmoothConfig(k_space=15, k_time=8, k_age=6)


def test_criterion_1_identity_link_closed_form(accept):
    t = synthesize_plots(SyntheticConfig(n_side=5, n_years=8, sigma=0.1, phi=0.0, theta=0.0), seed=1).table
    assert len(t) == 200
    lam = [0.5, 2.0, 0.1]
    t0 = time.perf_counter()
    fit = fit_gamm(t, SmoothConfig(k_space=8, k_time=4, k_age=5), correlation="none", link="identity",
                   lambdas=lam)
    elapsed = time.perf_counter() - t0
    M = fit.design.model_matrix(t)
    S = sum(l * P for l, P in zip(lam, fit.design.full_penalties()))
    w = t.n_trees
    beta = np.linalg.solve(M.T @ (w[:, None] * M) + S, M.T @ (w * t.y))
    err = float(np.max(np.abs(fit.coefficients - beta)))
    accept(1, err < 1e-10 and elapsed < 1.0, f"max coef diff {err:.2e} (< 1e-10), {elapsed:.2f} s (< 1 s)")


def test_criterion_2_reml_gradient(accept):
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(5):
        r = np.random.default_rng(200 + k)
        data = synthesize_plots(SyntheticConfig(n_side=6, n_years=6, sigma=0.1), seed=300 + k).table
        design = build_design(data, SmoothConfig(k_space=10, k_time=4, k_age=5))
        M = design.model_matrix(data)
        wm = WorkingModel(M, r.normal(size=len(data)), r.uniform(0.5, 2.0, len(data)), design,
                          PlotStructure(data.plot_id, data.year))
        rho = r.uniform(-3, 3, design.n_penalties)
        phi, theta = r.uniform(-0.6, 0.6, 2)
        g = wm.evaluate(rho, phi, theta, gradient=True).gradient
        h = 1e-5
        fd = np.array([(wm.evaluate(rho + h * e, phi, theta).score - wm.evaluate(rho - h * e, phi, theta).score)
                       / (2 * h) for e in np.eye(rho.size)])
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3))))
    elapsed = time.perf_counter() - t0
    accept(2, worst < 1e-4 and elapsed < 10.0, f"max relative error {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 10 s)")


def test_criterion_3_arma_autocorrelation(accept):
    x = simulate_arma11(0.8, 0.1, 10**6, np.random.default_rng(3))
    x = x - x.mean()
    emp = np.array([np.dot(x[:-h], x[h:]) / np.dot(x, x) for h in (1, 2)])
    rho = arma11_acf(0.8, 0.1, [1, 2])
    dev = float(np.max(np.abs(emp - rho)))
    accept(3, dev < 0.01, f"rho(1), rho(2) closed form {np.round(rho, 4)}, empirical {np.round(emp, 4)}, "
                          f"max diff {dev:.4f} (< 0.01)")


@pytest.mark.slow
def test_criterion_4_parameter_recovery(accept):
    t0 = time.perf_counter()
    dphi, dtheta, ratio = [], [], []
    for s in range(20):
        d = synthesize_plots(SyntheticConfig(), seed=100 + s)
        m = fit_gamm(d.table, MID_SMOOTH)
        dphi.append(abs(m.phi - 0.5))
        dtheta.append(abs(m.theta - 0.2))
        resid_sd = np.sqrt(np.mean((d.table.y - d.mu) ** 2))
        ratio.append(np.sqrt(np.mean((m.predict(d.table) - d.mu) ** 2)) / resid_sd)
    elapsed = time.perf_counter() - t0
    ok = max(dphi) <= 0.1 and max(dtheta) <= 0.15 and max(ratio) < 0.5 and elapsed < 600
    accept(4, ok, f"20 seeds: max |phi-0.5| {max(dphi):.3f} (<= 0.1), max |theta-0.2| {max(dtheta):.3f} "
                  f"(<= 0.15), max RMSE/sigma {max(ratio):.3f} (< 0.5), {elapsed:.0f} s (< 600 s)")


@pytest.mark.slow
def test_criterion_5_interval_coverage(accept):
    t0 = time.perf_counter()
    smooth = SmoothConfig(k_space=15, k_time=6, k_age=5)
    base = synthesize_plots(SyntheticConfig(n_side=10, n_years=10), seed=4999).table
    truth = fit_gamm(base, smooth)
    truth = replace(truth, Vp=np.zeros_like(truth.Vp))
    rows = build_scenario_grid(base, Scenario(Grid2(), ObservedAge(), grid_tag=None))
    true_trend = 100 * trend_point(truth, rows)[1]
    Y = simulate_response(truth, base, 200, seed=77)
    start = {"lambdas": truth.lambdas, "phi": truth.phi, "theta": truth.theta}
    hits = []
    for r in range(200):
        t = base.subset(np.arange(len(base)))
        t.y = Y[r]
        est = trend(fit_gamm(t, smooth, start=start), rows, nsim=1000, seed=r)
        hits.append((est.lower <= true_trend) & (true_trend <= est.upper))
    cover = float(np.mean(hits))
    elapsed = time.perf_counter() - t0
    accept(5, 0.90 <= cover <= 0.98 and elapsed < 1800,
           f"95% interval covers {100 * cover:.1f}% of {np.size(hits)} year-replicate cells (90-98%), "
           f"{elapsed:.0f} s (< 1800 s)")


@pytest.mark.slow
def test_criterion_6_grid_study(accept):
    # hand cases for the error measures
    zero = float(mpe_per_year(np.full((3, 2), 0.3), np.full(2, 0.3)).max())
    hand = float(rmpe_percent(mpe_per_year([[0.31], [0.27]], [0.30]))[0])
    d = synthesize_plots(SyntheticConfig(), seed=606)
    truth = fit_gamm(d.table, MID_SMOOTH)
    exam = run_grid_examination(truth, build_universe(d.table, 2015), SimProtocol(nsim=40, seed=6))
    dense, base = exam["dense8"], exam["base16"]
    ok = (zero == 0.0 and abs(hand - 2.2360679775) < 1e-9 and dense.rmpe_t_median < base.rmpe_t_median
          and dense.n_gt5 <= base.n_gt5)
    accept(6, ok, f"median RMPE_t dense8 {dense.rmpe_t_median:.3f}% < base16 {base.rmpe_t_median:.3f}%, "
                  f"RMPE_it>5% count {dense.n_gt5} <= {base.n_gt5}; hand cases {zero} and {hand:.4f}%")


def test_criterion_7_scale_invariance(accept):
    d = synthesize_plots(SyntheticConfig(n_side=8, n_years=8), seed=21).table
    smooth = SmoothConfig(k_space=15, k_time=6, k_age=5)
    a = fit_gamm(d, smooth)
    d2 = d.subset(np.arange(len(d)))
    d2.easting = d.easting * 1000.0
    d2.northing = d.northing * 1000.0
    b = fit_gamm(d2, smooth)
    diff = float(np.max(np.abs(a.predict(d) - b.predict(d2))))
    accept(7, diff < 1e-8, f"max fitted-value change {diff:.2e} (< 1e-8)")


def _outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_criterion_8_cli_determinism(accept, tmp_path):
    small = ["--k-space", "10", "--k-time", "4", "--k-age", "4"]
    runs = {}
    root = tmp_path / "run"
    for tag, threads in (("a", "1"), ("b", "1"), ("c", "3")):
        if root.exists():
            shutil.rmtree(root)
        common = ["--seed", "9", "--threads", threads]
        syn, fit = root / "syn", root / "fit"
        model, plots = str(fit / "model.json"), str(fit / "plots.csv")
        cmds = {
            "synthesize": ["synthesize", "--out-dir", str(syn), "--n-side", "8", "--n-years", "5",
                           "--first-year", "2011"],
            "fit": ["fit", "--input", str(syn / "survey.csv"), "--out-dir", str(fit), *small],
            "trend": ["trend", "--model", model, "--data", plots, "--nsim", "200", "--out-dir", str(root / "trend")],
            "map": ["map", "--model", model, "--year", "2013", "--age", "60", "--n-grid", "12",
                    "--out-dir", str(root / "map")],
            "simulate-grid": ["simulate-grid", "--model", model, "--data", plots, "--nsim", "2",
                              "--window", "2011", "2015", "--out-dir", str(root / "grid")],
            "diagnose": ["diagnose", "--model", model, "--data", plots, "--max-lag", "3",
                         "--out-dir", str(root / "diag")],
        }
        out = {}
        for name, argv in cmds.items():
            assert main(argv + common) == 0, name
            out[name] = _outputs(Path(argv[argv.index("--out-dir") + 1]))
        runs[tag] = out
    same = {name: runs["a"][name] == runs["b"][name] == runs["c"][name] for name in runs["a"]}
    n_files = sum(len(v) for v in runs["a"].values())
    accept(8, all(same.values()), f"{len(same)} commands, {n_files} files byte-identical across repeats and "
                                  f"--threads 1/3: {json.dumps(same)}")


def _tree(cls, age=None, plot_age=None):
    return TreeRecord("A", 3.5e6, 5.3e6, 2000, "spruce", cls, age, plot_age, "R1", "base16")


def test_criterion_9_data_rules(accept):
    checks = {
        "midpoint 0": midpoint_conversion(0) == 0.025,
        "midpoint 95": midpoint_conversion(95) == 0.975,
        "midpoint 100": midpoint_conversion(100) == 1.0,
        "stand age [80,82,78]": plot_stand_age([80, 82, 78]) == 80,
        "stand age [50,100] irregular": plot_stand_age([50, 100]) is AgeStatus.IRREGULAR,
        "stand age fallback 95": plot_stand_age([], 95) == 95,
        "one tree class 20": (aggregate_plot([_tree(20)]).mean_defoliation, aggregate_plot([_tree(20)]).tree_count)
        == (0.225, 1),
        "trees {0,100}": aggregate_plot([_tree(0), _tree(100)]).mean_defoliation == 0.5125,
        # midpoint rule gives 0.025, above the clamp floor
        "all class 0": abs(aggregate_plot([_tree(0)] * 3).mean_defoliation - 0.025) < 1e-15,
        "clamp low": clamp_defoliation(0.0) == 0.005,
        "clamp high": clamp_defoliation(1.0) == 0.995,
        "median [70,80] [1,1]": weighted_median_age([70, 80], [1, 1]) == 70,
        "median [60,70,80] [1,10,1]": weighted_median_age([60, 70, 80], [1, 10, 1]) == 70,
    }
    failed = [k for k, v in checks.items() if not v]
    accept(9, not failed, f"{len(checks) - len(failed)}/{len(checks)} tabulated values exact"
                          + (f"; failed: {failed}" if failed else "")
                          + "; all-class-0 plot mean is 0.025 by the midpoint rule (table lists y_min)")
