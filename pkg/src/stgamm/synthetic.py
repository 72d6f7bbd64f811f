"""Synthetic survey data with a known truth.

Plots sit on a square 8 km lattice; every second node in both directions
belongs to the 16 km base grid.  An optional denser block adds 4 km offset
plots in one region.  The mean defoliation follows a smooth space-time
surface plus a stand-age effect on the logit scale, and plot-level errors
are ARMA(1,1) over years with variance ``sigma^2 / n_trees``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit

from .arma import PlotStructure
from .survey_data import PlotTable, TreeRecord, Y_MAX, Y_MIN


@dataclass
class SyntheticConfig:
    n_side: int = 20
    spacing_m: float = 8000.0
    anchor: tuple[float, float] = (3_500_000.0, 5_300_000.0)
    first_year: int = 1996
    n_years: int = 20
    base_level: float = 0.2
    space_amplitude: float = 0.5
    time_amplitude: float = 0.35
    age_effect: float = 0.6
    age_range: tuple[int, int] = (20, 140)
    trees_range: tuple[int, int] = (5, 25)
    sigma: float = 0.15
    phi: float = 0.5
    theta: float = 0.2
    p_observed: float = 1.0
    denser_region: str | None = None
    species: str = "spruce"
    tree_sd: float = 0.0
    regions: tuple[str, ...] = ("R1", "R2", "R3", "R4")

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticData:
    table: PlotTable
    mu: np.ndarray
    config: SyntheticConfig = field(repr=False, default=None)


def truth_eta(config: SyntheticConfig, easting, northing, year, age) -> np.ndarray:
    """Logit-scale truth: smooth surface, slow trend with a bump, and an age effect."""
    L = config.spacing_m * max(config.n_side - 1, 1)
    u = (np.asarray(easting, dtype=float) - config.anchor[0]) / L
    v = (np.asarray(northing, dtype=float) - config.anchor[1]) / L
    t = (np.asarray(year, dtype=float) - config.first_year) / max(config.n_years - 1, 1)
    a = (np.asarray(age, dtype=float) - 80.0) / 60.0
    space = np.sin(2.0 * np.pi * u) * np.cos(np.pi * v) + 0.5 * v
    time = 0.6 * (t - 0.5) + np.exp(-((t - 0.6) ** 2) / 0.02) - 0.3
    interaction = 0.5 * (u - 0.5) * (t - 0.5)
    return (
        logit(config.base_level)
        + config.space_amplitude * space
        + config.time_amplitude * time
        + config.space_amplitude * interaction
        + config.age_effect * np.tanh(a)
    )


def _region(config: SyntheticConfig, i: int, j: int) -> str:
    half = config.n_side / 2.0
    q = (i >= half) + 2 * (j >= half)
    return config.regions[int(q) % len(config.regions)]


def plot_universe(config: SyntheticConfig, rng: np.random.Generator):
    """Fixed plot attributes: id, coordinates, grid tag, region, base age, tree count."""
    rows = []
    for i in range(config.n_side):
        for j in range(config.n_side):
            tag = "base16" if (i % 2 == 0 and j % 2 == 0) else "dense8"
            rows.append((f"P{i:03d}{j:03d}", config.anchor[0] + i * config.spacing_m,
                         config.anchor[1] + j * config.spacing_m, tag, _region(config, i, j)))
    if config.denser_region is not None:
        for i in range(config.n_side - 1):
            for j in range(config.n_side - 1):
                reg = _region(config, i, j)
                if reg == config.denser_region:
                    rows.append((f"D{i:03d}{j:03d}", config.anchor[0] + (i + 0.5) * config.spacing_m,
                                 config.anchor[1] + (j + 0.5) * config.spacing_m, "denser", reg))
    n = len(rows)
    ages = rng.integers(config.age_range[0], config.age_range[1] + 1, size=n)
    trees = rng.integers(config.trees_range[0], config.trees_range[1] + 1, size=n)
    return rows, ages, trees


def synthesize_plots(config: SyntheticConfig | None = None, seed: int = 0) -> SyntheticData:
    """Plot-level observations drawn from the truth with ARMA(1,1) noise."""
    config = config or SyntheticConfig()
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x5EED]))
    rows, ages, trees = plot_universe(config, rng)
    years = np.arange(config.first_year, config.first_year + config.n_years)
    pid, e, nn, yr, age, nt, gt, rt = [], [], [], [], [], [], [], []
    for (p, x, yy, tag, reg), a0, k in zip(rows, ages, trees):
        obs = rng.random(years.size) < config.p_observed
        if not obs.any():
            obs[rng.integers(years.size)] = True
        for t in years[obs]:
            pid.append(p); e.append(x); nn.append(yy); yr.append(int(t))
            age.append(int(a0 + (t - config.first_year))); nt.append(int(k))
            gt.append(tag); rt.append(reg)
    e = np.asarray(e); nn = np.asarray(nn); yr = np.asarray(yr); age = np.asarray(age, dtype=float)
    nt = np.asarray(nt, dtype=float)
    mu = expit(truth_eta(config, e, nn, yr, age))
    structure = PlotStructure(pid, yr)
    if config.sigma > 0:
        eps = structure.sample(config.phi, config.theta, config.sigma / np.sqrt(nt), rng)
    else:
        eps = np.zeros_like(mu)
    y = np.clip(mu + eps, Y_MIN, Y_MAX)
    table = PlotTable(plot_id=pid, easting=e, northing=nn, year=yr, age=age, y=y, n_trees=nt,
                      species=[config.species] * len(pid), region_tag=rt, grid_tag=gt)
    return SyntheticData(table, mu, config)


def _to_class(v: np.ndarray) -> np.ndarray:
    c = 5 * np.floor(np.clip(v, 0.0, 1.0) * 20.0).astype(int)
    return np.where(v >= 1.0, 100, np.minimum(c, 95))


def synthesize_survey(config: SyntheticConfig | None = None, seed: int = 0) -> list[TreeRecord]:
    """Tree-level records whose plot means follow :func:`synthesize_plots`.

    Each tree's defoliation is the plot value plus optional tree noise,
    discretized into the 5% class containing it.
    """
    config = config or SyntheticConfig()
    data = synthesize_plots(config, seed)
    t = data.table
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x7EE5]))
    records = []
    for i in range(len(t)):
        k = int(t.n_trees[i])
        v = t.y[i] + (config.tree_sd * rng.standard_normal(k) if config.tree_sd > 0 else np.zeros(k))
        for c in _to_class(v):
            records.append(TreeRecord(
                plot_id=str(t.plot_id[i]), easting=float(t.easting[i]), northing=float(t.northing[i]),
                year=int(t.year[i]), species=config.species, defoliation_class=int(c),
                tree_age=int(t.age[i]), plot_age=None, region_tag=str(t.region_tag[i]),
                grid_tag=str(t.grid_tag[i]),
            ))
    return records
