"""Fit a defoliation model to a synthetic survey and estimate the yearly trend.

Run with ``python demos/fit_and_trend.py``; it takes a few seconds.
"""

# # From trees to plots
#
# A survey records one defoliation class (0, 5, ..., 100 percent) per tree.
# Trees are aggregated to plot-year means after mapping each class to the
# midpoint of its interval, and plots with no usable age get a fallback.

import numpy as np

from stgamm import (Grid1, Grid2, ObservedAge, FixedAge, PlotTable, Scenario, SmoothConfig, SyntheticConfig,
                    aggregate_survey, build_scenario_grid, fit_gamm, spatial_map, synthesize_survey, trend)
from stgamm.posterior_trend import scenario_age

config = SyntheticConfig(n_side=10, n_years=12, first_year=2004)
trees = synthesize_survey(config, seed=11)
table = PlotTable.from_observations(aggregate_survey(trees, species="spruce"))
print(f"{len(trees)} tree records -> {len(table)} plot-years on {np.unique(table.plot_id).size} plots")
print("first plot means:", np.round(table.y[:5], 3))

# # Fitting
#
# The linear predictor is a space-time tensor smooth plus a smooth of stand
# age, on the logit scale.  Errors within a plot follow ARMA(1,1) over the
# survey years.  Smaller bases than the defaults keep this demo quick.

smooth = SmoothConfig(k_space=15, k_time=6, k_age=5)
model = fit_gamm(table, smooth)
print(f"phi={model.phi:.3f} theta={model.theta:.3f} sigma={np.sqrt(model.sigma2):.3f}")
print("smoothing parameters:", np.array2string(model.lambdas, precision=3))
print(f"adjusted R^2={model.stats['r2_adj']:.3f}  BIC={model.stats['bic']:.1f}")

# # Yearly trend
#
# The trend is the mean predicted defoliation over a set of plots, computed
# for each coefficient draw from the approximate posterior.  A fixed plot set
# observed in the last year (grid 1) removes changes in plot composition;
# the yearly observed sets (grid 2) follow what was actually sampled.

last = int(table.year.max())
for scen in (Scenario(Grid1(last), FixedAge(scenario_age(table, last))),
             Scenario(Grid2(), ObservedAge())):
    est = trend(model, build_scenario_grid(table, scen), nsim=500, seed=1)
    print(f"\n{scen.describe()}")
    for y, m, lo, hi in zip(est.years, est.median, est.lower, est.upper):
        print(f"  {y}  {m:5.1f}%  [{lo:5.1f}, {hi:5.1f}]")

# # A map for one year
#
# Cells far from any plot are masked rather than extrapolated.

surface = spatial_map(model, year=last, fixed_age=60.0, n_grid=30)
shown = surface.values[~surface.mask]
print(f"\nmap {last}: {shown.size} cells, {shown.min():.1f}% to {shown.max():.1f}%")
