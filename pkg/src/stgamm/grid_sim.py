"""Survey-grid examination by simulation.

A fitted model is taken as the truth.  Each draw simulates defoliation for
every plot of a fixed plot universe and every year (posterior coefficient
draw plus ARMA errors, truncated to [0, 1]), takes the sample of each
candidate grid, refits the model on it and compares the refitted trend and
plot-level predictions with the truth.  Errors are summarized as root mean
prediction errors in percent defoliation.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arma import PlotStructure
from .gamm_engine import FittedModel, GammError, OptimizerConfig, fit_gamm
from .posterior_trend import _factor, trend_point
from .rng import parallel_map, stream
from .smooth_basis import BasisError, SmoothConfig, TensorProductSmooth
from .survey_data import PlotTable

logger = logging.getLogger(__name__)

SIM_STREAM = 2
GRID_MEMBERS = {
    "base16": ("base16",),
    "dense8": ("base16", "dense8"),
    "densification": ("base16", "dense8", "denser"),
}
CELL_SIZE = {"base16": 16000.0, "dense8": 8000.0}


class GridSimError(RuntimeError):
    pass


@dataclass
class SimProtocol:
    nsim: int = 40
    approach: str = "I"
    excluded_regions: tuple[str, ...] = ()
    grids: tuple[str, ...] | None = None
    seed: int = 0
    window: tuple[int, int] = (2006, 2015)
    trend_grid: str = "base16"
    max_failure_fraction: float = 0.2
    threads: int = 1
    smooth: SmoothConfig | None = None
    optimizer: OptimizerConfig | None = None
    strict: bool = False
    anchor: tuple[float, float] | None = None

    def __post_init__(self):
        if self.nsim < 1:
            raise ValueError("nsim must be at least 1")
        if self.approach not in ("I", "II"):
            raise ValueError("approach must be 'I' or 'II'")
        if self.grids is None:
            self.grids = ("dense8", "base16") if self.approach == "I" else ("densification", "base16")


@dataclass
class GridSimReport:
    grid: str
    years: np.ndarray
    rmpe_t: np.ndarray
    rmpe_it: np.ndarray
    n_gt5: int
    n_points: int
    n_failed: int
    nsim: int
    plot_id: np.ndarray = field(repr=False, default=None)

    @property
    def rmpe_t_median(self) -> float:
        return float(np.median(self.rmpe_t))

    @property
    def rmpe_t_range(self) -> tuple[float, float]:
        return float(self.rmpe_t.min()), float(self.rmpe_t.max())

    @property
    def rmpe_it_median(self) -> float:
        return float(np.median(self.rmpe_it))

    @property
    def rmpe_it_range(self) -> tuple[float, float]:
        return float(self.rmpe_it.min()), float(self.rmpe_it.max())


# --------------------------------------------------------------------------
# plot universe and grids


def build_universe(data: PlotTable, reference_year: int | None = None, years=None,
                   excluded_regions=()) -> PlotTable:
    """All plots of the reference year, replicated over ``years`` with frozen age and tree count.

    The reference year defaults to the year with most plots.
    """
    if reference_year is None:
        yrs, counts = np.unique(data.year, return_counts=True)
        reference_year = int(yrs[np.argmax(counts)])
    ref = data.subset((data.year == reference_year) & ~np.isin(data.region_tag, list(excluded_regions)))
    if len(ref) == 0:
        raise GridSimError(f"no plots in reference year {reference_year}")
    years = np.unique(data.year) if years is None else np.asarray(sorted(years), dtype=int)
    order = np.argsort(ref.plot_id, kind="stable")
    ref = ref.subset(order)
    n_p, n_t = len(ref), years.size
    return PlotTable(
        plot_id=np.repeat(ref.plot_id, n_t),
        easting=np.repeat(ref.easting, n_t),
        northing=np.repeat(ref.northing, n_t),
        year=np.tile(years, n_p),
        age=np.repeat(ref.age, n_t),
        y=np.full(n_p * n_t, np.nan),
        n_trees=np.repeat(ref.n_trees, n_t),
        species=np.repeat(ref.species, n_t),
        region_tag=np.repeat(ref.region_tag, n_t),
        grid_tag=np.repeat(ref.grid_tag, n_t),
    )


def lattice_membership(easting, northing, cell: float, anchor: tuple[float, float]) -> np.ndarray:
    """True where a point lies on the lattice ``anchor + cell * Z^2`` (within half a cell per axis)."""
    ok = np.ones(np.size(easting), dtype=bool)
    for v, a in ((easting, anchor[0]), (northing, anchor[1])):
        q = (np.asarray(v, dtype=float) - a) / cell
        ok &= np.abs(q - np.round(q)) < 0.5 - 1e-9
    return ok


def subsample_grid(universe: PlotTable, resolution: str, *, strict: bool = False,
                   anchor: tuple[float, float] | None = None) -> np.ndarray:
    """Boolean row mask of the plots belonging to a grid resolution.

    Membership follows the grid tags (``base16`` within ``dense8`` within
    ``densification``).  Tags of ``base16`` and ``dense8`` plots are checked
    against the geometric lattice anchored at the component-wise minimum of
    the base-grid coordinates.
    """
    if resolution not in GRID_MEMBERS:
        raise ValueError(f"unknown grid resolution {resolution!r}")
    tags = universe.grid_tag
    base = tags == "base16"
    if anchor is None and np.any(base):
        anchor = (float(universe.easting[base].min()), float(universe.northing[base].min()))
    if anchor is not None:
        offenders = []
        for tag, cell in CELL_SIZE.items():
            sel = tags == tag
            bad = sel & ~lattice_membership(universe.easting, universe.northing, cell, anchor)
            offenders += sorted(set(universe.plot_id[bad].tolist()))
        if offenders:
            msg = f"grid tag does not match lattice geometry for plots: {', '.join(offenders)}"
            if strict:
                raise GridSimError(msg)
            warnings.warn(msg, stacklevel=2)
    return np.isin(tags, GRID_MEMBERS[resolution])


# --------------------------------------------------------------------------
# error measures


def mpe_per_year(estimates, truth) -> np.ndarray:
    """Mean over draws of squared trend errors; ``estimates`` is (nsim, T)."""
    est = np.asarray(estimates, dtype=float)
    tr = np.asarray(truth, dtype=float)
    if est.ndim != 2 or est.shape[1:] != tr.shape:
        raise ValueError(f"shape mismatch: estimates {est.shape}, truth {tr.shape}")
    return np.mean((est - tr) ** 2, axis=0)


def mpe_per_plot(estimates, truth) -> np.ndarray:
    """Mean over draws of squared plot-year errors; ``estimates`` is (nsim, ...)."""
    est = np.asarray(estimates, dtype=float)
    tr = np.asarray(truth, dtype=float)
    if est.shape[1:] != tr.shape:
        raise ValueError(f"shape mismatch: estimates {est.shape}, truth {tr.shape}")
    return np.mean((est - tr) ** 2, axis=0)


def rmpe_percent(mpe) -> np.ndarray:
    return 100.0 * np.sqrt(mpe)


# --------------------------------------------------------------------------
# simulation


def smooth_config_of(model: FittedModel) -> SmoothConfig:
    cfg = SmoothConfig(include_age=False, include_space_time=False)
    for t in model.design.terms:
        if isinstance(t.smooth, TensorProductSmooth):
            cfg.include_space_time = True
            cfg.k_space, cfg.k_time = t.smooth.space.k, t.smooth.time.k
        else:
            cfg.include_age = True
            cfg.k_age = t.smooth.k
    return cfg


class ResponseSimulator:
    """Draws ``y_its`` for a universe from a truth model."""

    def __init__(self, truth: FittedModel, universe: PlotTable):
        self.truth = truth
        self.M = truth.predict_matrix(universe)
        self.structure = PlotStructure(universe.plot_id, universe.year)
        self.sd = np.sqrt(truth.sigma2 / universe.n_trees)
        self.L = _factor(truth.Vp)

    def draw(self, s: int, seed: int) -> np.ndarray:
        rng = stream(seed, s, SIM_STREAM)
        coef = self.truth.coefficients + self.L @ rng.standard_normal(self.L.shape[0])
        mean = self.truth.linkobj.linkinv(self.M @ coef)
        if self.truth.sigma2 > 0:
            eps = self.structure.sample(self.truth.phi, self.truth.theta, self.sd, rng)
        else:
            eps = 0.0
        return np.clip(mean + eps, 0.0, 1.0)


def simulate_response(truth: FittedModel, universe: PlotTable, nsim: int, seed: int = 0,
                      threads: int = 1) -> np.ndarray:
    """Simulated responses, shape (nsim, rows of universe)."""
    sim = ResponseSimulator(truth, universe)
    return np.vstack(parallel_map(lambda s: sim.draw(s, seed), range(nsim), threads))


@dataclass
class GridExamination:
    reports: dict[str, GridSimReport]
    universe: PlotTable
    truth_trend: np.ndarray

    def __getitem__(self, grid: str) -> GridSimReport:
        return self.reports[grid]


def run_grid_examination(truth: FittedModel, universe: PlotTable, protocol: SimProtocol) -> GridExamination:
    """Simulate, subsample, refit and summarize prediction errors per candidate grid."""
    universe = universe.subset(~np.isin(universe.region_tag, list(protocol.excluded_regions)))
    if len(universe) == 0:
        raise GridSimError("plot universe is empty")
    masks = {g: subsample_grid(universe, g, strict=protocol.strict, anchor=protocol.anchor)
             for g in protocol.grids}
    for g, m in masks.items():
        if not np.any(m):
            raise GridSimError(f"grid {g!r} has no plots in the universe")
    trend_rows = universe.subset(subsample_grid(universe, protocol.trend_grid, anchor=protocol.anchor))
    years, mu_t = trend_point(truth, trend_rows)
    mu_it = truth.predict(universe)
    sim = ResponseSimulator(truth, universe)
    smooth = protocol.smooth or smooth_config_of(truth)
    start = {"lambdas": truth.lambdas, "phi": truth.phi, "theta": truth.theta}

    def one_draw(s):
        y = sim.draw(s, protocol.seed)
        out = {}
        for g, m in masks.items():
            sample = universe.subset(m)
            sample.y = y[m]
            try:
                fit = fit_gamm(sample, smooth, correlation=truth.correlation, link=truth.link,
                               optimizer=protocol.optimizer, start=start)
            except (GammError, BasisError, np.linalg.LinAlgError, ValueError) as exc:
                logger.warning("draw %d grid %s: refit failed: %s", s, g, exc)
                out[g] = None
                continue
            _, yt = trend_point(fit, trend_rows)
            out[g] = ((yt - mu_t) ** 2, (fit.predict(universe) - mu_it) ** 2)
        return out

    results = parallel_map(one_draw, range(protocol.nsim), protocol.threads)
    reports = {}
    in_window = (universe.year >= protocol.window[0]) & (universe.year <= protocol.window[1])
    n_points = int(np.unique(universe.plot_id).size)
    for g in protocol.grids:
        ok = [r[g] for r in results if r[g] is not None]
        n_failed = protocol.nsim - len(ok)
        if n_failed > protocol.max_failure_fraction * protocol.nsim:
            raise GridSimError(f"grid {g!r}: {n_failed} of {protocol.nsim} refits failed")
        sse_t = np.sum([o[0] for o in ok], axis=0)
        sse_it = np.sum([o[1] for o in ok], axis=0)
        rmpe_t = rmpe_percent(sse_t / len(ok))
        rmpe_it = rmpe_percent(sse_it / len(ok))
        n_gt5 = int(np.unique(universe.plot_id[in_window & (rmpe_it > 5.0)]).size)
        reports[g] = GridSimReport(g, years, rmpe_t, rmpe_it, n_gt5, n_points, n_failed,
                                   protocol.nsim, universe.plot_id)
    return GridExamination(reports, universe, mu_t)


def write_report_csv(exam: GridExamination, path: str | Path, species: str = "", meta: dict | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["species", "grid", "rmpe_t_median", "rmpe_t_min", "rmpe_t_max", "rmpe_it_median",
                    "rmpe_it_min", "rmpe_it_max", "n_gt5", "n_points", "n_failed"])
        for g, r in exam.reports.items():
            w.writerow([species, g, repr(r.rmpe_t_median), repr(r.rmpe_t_range[0]), repr(r.rmpe_t_range[1]),
                        repr(r.rmpe_it_median), repr(r.rmpe_it_range[0]), repr(r.rmpe_it_range[1]),
                        r.n_gt5, r.n_points, r.n_failed])


def write_plot_rmpe_csv(exam: GridExamination, path: str | Path, meta: dict | None = None) -> None:
    universe = exam.universe
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid", "plot_id", "easting", "northing", "year", "rmpe_it_pct", "gt5", "gt10"])
        for g, r in exam.reports.items():
            for i in range(len(universe)):
                v = float(r.rmpe_it[i])
                w.writerow([g, universe.plot_id[i], repr(float(universe.easting[i])),
                            repr(float(universe.northing[i])), int(universe.year[i]), repr(v),
                            int(v > 5.0), int(v > 10.0)])
