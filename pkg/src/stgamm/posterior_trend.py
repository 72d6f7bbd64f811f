"""Posterior simulation, age- and grid-adjusted trends, and map surfaces.

Coefficient draws come from the Gaussian posterior ``N(beta_hat, Vp)``.  A
trend for year ``t`` averages the back-transformed predictions of all
scenario plots in that year (unweighted) separately for every draw; the
empirical quantiles over draws give the credible band.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .gamm_engine import FittedModel
from .rng import parallel_map, stream
from .survey_data import PlotTable, weighted_median_age

COEF_STREAM = 1


class TrendError(ValueError):
    pass


@dataclass(frozen=True)
class Grid1:
    """One fixed plot set (observed in ``reference_year``) for all years."""

    reference_year: int

    def describe(self):
        return f"grid1({self.reference_year})"


@dataclass(frozen=True)
class Grid2:
    """Each year's actually observed plot set."""

    def describe(self):
        return "grid2"


@dataclass(frozen=True)
class ObservedAge:
    def describe(self):
        return "observed_age"


@dataclass(frozen=True)
class FixedAge:
    years: float

    def __post_init__(self):
        if self.years < 0:
            raise TrendError("fixed age must be nonnegative")

    def describe(self):
        return f"fixed_age({self.years:g})"


@dataclass(frozen=True)
class Scenario:
    grid: Grid1 | Grid2
    age: ObservedAge | FixedAge = ObservedAge()
    years: tuple[int, ...] | None = None
    grid_tag: str | None = "base16"

    def describe(self) -> str:
        return f"{self.grid.describe()}/{self.age.describe()}"


@dataclass
class PredictionRows:
    plot_id: np.ndarray
    easting: np.ndarray
    northing: np.ndarray
    year: np.ndarray
    age: np.ndarray

    def __len__(self):
        return len(self.year)

    def __getitem__(self, key):
        return getattr(self, key)


@dataclass
class TrendEstimate:
    years: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    nsim: int
    scenario: str
    draws: np.ndarray = field(repr=False, default=None)
    extrapolated: np.ndarray = field(repr=False, default=None)

    def interval(self, level: float):
        """Quantile band at another nominal level from the stored draws."""
        a = (1.0 - level) / 2.0
        return (np.quantile(self.draws, a, axis=1), np.quantile(self.draws, 1.0 - a, axis=1))


def scenario_age(data: PlotTable, year: int, grid_tag: str | None = "base16") -> float:
    """Tree-weighted median stand age of the plots observed in ``year``."""
    sel = data.year == year
    if grid_tag is not None:
        sel &= data.grid_tag == grid_tag
    if not np.any(sel):
        raise TrendError(f"no plots observed in {year}")
    return weighted_median_age(data.age[sel], data.n_trees[sel])


def build_scenario_grid(data: PlotTable, scenario: Scenario) -> PredictionRows:
    """Prediction rows (plot, coordinates, year, age) for a scenario."""
    base = data if scenario.grid_tag is None else data.subset(data.grid_tag == scenario.grid_tag)
    years = np.asarray(sorted(set(data.year.tolist())) if scenario.years is None else scenario.years, dtype=int)
    if isinstance(scenario.grid, Grid1):
        ref = base.subset(base.year == scenario.grid.reference_year)
        if len(ref) == 0:
            raise TrendError(f"reference year {scenario.grid.reference_year} has no plots")
        order = np.argsort(ref.plot_id, kind="stable")
        pid = ref.plot_id[order]
        n_p = pid.size
        rows = PredictionRows(
            plot_id=np.tile(pid, years.size),
            easting=np.tile(ref.easting[order], years.size),
            northing=np.tile(ref.northing[order], years.size),
            year=np.repeat(years, n_p),
            age=np.tile(ref.age[order], years.size).astype(float),
        )
    else:
        sel = np.isin(base.year, years)
        sub = base.subset(sel)
        order = np.lexsort((sub.plot_id, sub.year))
        rows = PredictionRows(sub.plot_id[order], sub.easting[order], sub.northing[order],
                              sub.year[order], sub.age[order].astype(float))
        missing = sorted(set(years.tolist()) - set(rows.year.tolist()))
        if missing:
            raise TrendError(f"no plots for year(s) {missing}")
    if isinstance(scenario.age, FixedAge):
        rows.age = np.full(len(rows), float(scenario.age.years))
    return rows


def _factor(Vp: np.ndarray) -> np.ndarray:
    if not np.any(Vp):
        return np.zeros_like(Vp)
    V = 0.5 * (Vp + Vp.T)
    scale = float(np.mean(np.diag(V)))
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            return linalg.cholesky(V + jitter * scale * np.eye(V.shape[0]), lower=True)
        except linalg.LinAlgError:
            continue
    raise TrendError("posterior covariance is not positive semi-definite even after jitter")


def simulate_coefficients(model: FittedModel, nsim: int, seed: int, threads: int = 1) -> np.ndarray:
    """``nsim`` draws from ``N(coefficients, Vp)``; draw ``s`` uses its own stream."""
    if nsim < 1:
        raise TrendError("nsim must be at least 1")
    L = _factor(model.Vp)
    mean = model.coefficients
    p = mean.size

    def one(s):
        return mean + L @ stream(seed, s, COEF_STREAM).standard_normal(p)

    return np.vstack(parallel_map(one, range(nsim), threads))


def _yearly_means(values: np.ndarray, years: np.ndarray, year_levels: np.ndarray) -> np.ndarray:
    out = np.empty((year_levels.size,) + values.shape[1:])
    for k, t in enumerate(year_levels):
        sel = years == t
        if not np.any(sel):
            raise TrendError(f"empty plot set for year {t}")
        out[k] = values[sel].mean(axis=0)
    return out


def trend(model: FittedModel, rows: PredictionRows, nsim: int = 1000, seed: int = 0,
          level: float = 0.95, scenario: str = "", threads: int = 1) -> TrendEstimate:
    """Yearly mean defoliation (percent) with a credible band of nominal ``level``."""
    M, flags = model.predict_matrix(rows, return_flags=True)
    draws = simulate_coefficients(model, nsim, seed, threads)
    mu = model.linkobj.linkinv(M @ draws.T) * 100.0
    year_levels = np.unique(rows.year)
    yearly = _yearly_means(mu, np.asarray(rows.year), year_levels)
    a = (1.0 - level) / 2.0
    lo, med, hi = np.quantile(yearly, [a, 0.5, 1.0 - a], axis=1)
    return TrendEstimate(year_levels, med, lo, hi, level, nsim, scenario, yearly, flags)


def trend_point(model: FittedModel, rows: PredictionRows, coefficients=None) -> tuple[np.ndarray, np.ndarray]:
    """Yearly mean of the back-transformed prediction at fixed coefficients (fraction scale)."""
    mu = model.linkobj.linkinv(model.linear_predictor(rows, coefficients))
    year_levels = np.unique(rows.year)
    return year_levels, _yearly_means(mu, np.asarray(rows.year), year_levels)


@dataclass
class MapSurface:
    easting: np.ndarray
    northing: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    year: int
    age: float


def training_sites(model: FittedModel) -> np.ndarray:
    """Plot locations retained as spatial knots (all sites unless thinned)."""
    for t in model.design.terms:
        if hasattr(t.smooth, "space"):
            sp = t.smooth.space
            return sp.knots * sp.scale + sp.center
    raise TrendError("model has no spatial term")


def spatial_map(model: FittedModel, year: int, fixed_age: float, n_grid: int = 60,
                mask_distance: float = 0.02, sites=None) -> MapSurface:
    """Posterior-mean defoliation (percent) on a regular lattice over the training box.

    Cells farther than ``mask_distance`` times the box diagonal from every
    training site are masked.
    """
    if n_grid < 2:
        raise TrendError("n_grid must be at least 2")
    (e0, e1), (n0, n1) = model.design.ranges["easting"], model.design.ranges["northing"]
    ge = np.linspace(e0, e1, n_grid)
    gn = np.linspace(n0, n1, n_grid)
    E, N = np.meshgrid(ge, gn, indexing="xy")
    pts = np.column_stack([E.ravel(), N.ravel()])
    rows = PredictionRows(np.full(pts.shape[0], ""), pts[:, 0], pts[:, 1],
                          np.full(pts.shape[0], int(year)), np.full(pts.shape[0], float(fixed_age)))
    values = model.predict(rows).reshape(n_grid, n_grid) * 100.0
    sites = training_sites(model) if sites is None else np.asarray(sites, dtype=float).reshape(-1, 2)
    dist, _ = cKDTree(sites).query(pts)
    diag = float(np.hypot(e1 - e0, n1 - n0))
    mask = (dist > mask_distance * diag).reshape(n_grid, n_grid)
    return MapSurface(ge, gn, values, mask, int(year), float(fixed_age))


# --------------------------------------------------------------------------
# output


def _header(fh, meta: dict):
    for k, v in meta.items():
        fh.write(f"# {k}: {v}\n")


def write_trend_csv(est: TrendEstimate, path: str | Path, meta: dict | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _header(fh, meta or {})
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "median_pct", "q025_pct", "q975_pct", "scenario", "nsim", "level"])
        for k, t in enumerate(est.years):
            w.writerow([int(t), repr(float(est.median[k])), repr(float(est.lower[k])),
                        repr(float(est.upper[k])), est.scenario, est.nsim, est.level])


def write_map_csv(surface: MapSurface, path: str | Path, meta: dict | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _header(fh, meta or {})
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["easting", "northing", "value", "masked"])
        for j, nv in enumerate(surface.northing):
            for i, ev in enumerate(surface.easting):
                w.writerow([repr(float(ev)), repr(float(nv)), repr(float(surface.values[j, i])),
                            int(surface.mask[j, i])])
