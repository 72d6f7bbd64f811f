"""Residual checks for spatial and temporal correlation left after fitting."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .arma import PlotStructure
from .gamm_engine import FittedModel


@dataclass
class ResidualSet:
    raw: np.ndarray
    normalized: np.ndarray
    plot_id: np.ndarray
    year: np.ndarray
    easting: np.ndarray
    northing: np.ndarray


def normalized_residuals(model: FittedModel, data) -> ResidualSet:
    """Response residuals whitened by the fitted error model and divided by sigma."""
    raw = np.asarray(data.y, dtype=float) - model.predict(data)
    sqrt_w = np.sqrt(np.asarray(data.n_trees, dtype=float))
    sigma = np.sqrt(model.sigma2)
    if model.correlation == "arma11" and (model.phi != 0.0 or model.theta != 0.0):
        (white,), _ = PlotStructure(data.plot_id, data.year).whiten(model.phi, model.theta, sqrt_w, raw)
    else:
        white = raw * sqrt_w
    norm = white / sigma if sigma > 0 else np.zeros_like(white)
    return ResidualSet(raw, norm, np.asarray(data.plot_id).astype(str), np.asarray(data.year, dtype=int),
                       np.asarray(data.easting, dtype=float), np.asarray(data.northing, dtype=float))


@dataclass
class Semivariogram:
    center: np.ndarray
    gamma: np.ndarray
    count: np.ndarray
    edges: np.ndarray


def empirical_semivariogram(res: ResidualSet, bins=None, max_distance: float | None = None,
                            n_bins: int = 20, values=None) -> Semivariogram:
    """Binned semivariance of residual pairs observed in the same year.

    Default bins: ``n_bins`` equal bins up to half the diagonal of the
    bounding box.  Empty bins have ``gamma = nan`` and count 0.
    """
    r = res.normalized if values is None else np.asarray(values, dtype=float)
    if r.size < 2:
        raise ValueError("need at least two residuals")
    if bins is None:
        if max_distance is None:
            max_distance = 0.5 * float(np.hypot(np.ptp(res.easting), np.ptp(res.northing)))
        edges = np.linspace(0.0, max_distance, n_bins + 1)
    else:
        edges = np.asarray(bins, dtype=float)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if max_distance is not None:
            edges = edges[edges <= max_distance]
    nb = edges.size - 1
    sums = np.zeros(nb)
    counts = np.zeros(nb, dtype=np.int64)
    for t in np.unique(res.year):
        sel = res.year == t
        if np.count_nonzero(sel) < 2:
            continue
        xy = np.column_stack([res.easting[sel], res.northing[sel]])
        d = pdist(xy)
        sq = pdist(r[sel][:, None], "sqeuclidean")
        idx = np.searchsorted(edges, d, side="right") - 1
        idx[d == edges[-1]] = nb - 1
        ok = (idx >= 0) & (idx < nb)
        sums += np.bincount(idx[ok], weights=sq[ok], minlength=nb)
        counts += np.bincount(idx[ok], minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, sums / (2.0 * counts), np.nan)
    return Semivariogram(0.5 * (edges[:-1] + edges[1:]), gamma, counts, edges)


@dataclass
class Correlogram:
    lags: np.ndarray
    acf: np.ndarray
    pacf: np.ndarray
    n_pairs: np.ndarray

    @property
    def band(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 2.0 / np.sqrt(self.n_pairs)


def durbin_levinson(acf: np.ndarray) -> np.ndarray:
    """Partial autocorrelations for lags 1..len(acf)-1 from an autocorrelation sequence."""
    acf = np.asarray(acf, dtype=float)
    m = acf.size - 1
    pacf = np.zeros(m + 1)
    pacf[0] = 1.0
    if m == 0:
        return pacf
    phi = np.zeros(m + 1)
    phi[1] = acf[1]
    pacf[1] = acf[1]
    v = 1.0 - acf[1] ** 2
    for k in range(2, m + 1):
        num = acf[k] - np.dot(phi[1:k], acf[k - 1:0:-1])
        a = num / v if v > 0 else 0.0
        new = phi.copy()
        new[k] = a
        new[1:k] = phi[1:k] - a * phi[k - 1:0:-1]
        phi = new
        v *= 1.0 - a * a
        pacf[k] = a
    return pacf


def acf_pacf(res: ResidualSet, max_lag: int = 5, values=None) -> Correlogram:
    """Autocorrelation pooled over plots at true year distances, plus PACF."""
    r = res.normalized if values is None else np.asarray(values, dtype=float)
    _, code = np.unique(res.plot_id, return_inverse=True)
    years = res.year.astype(np.int64)
    span = int(max(np.max(years) - np.min(years), 0)) + 1
    key = code.astype(np.int64) * (2 * span + 2) + (years - years.min())
    order = np.argsort(key)
    ks, rs = key[order], r[order]
    first = np.full(code.max() + 1, np.iinfo(np.int64).max)
    last = np.full(code.max() + 1, np.iinfo(np.int64).min)
    np.minimum.at(first, code, years)
    np.maximum.at(last, code, years)
    longest = int(np.max(last - first)) + 1
    if max_lag >= longest:
        warnings.warn(f"max_lag {max_lag} truncated to {longest - 1} (longest series has {longest} years)",
                      stacklevel=2)
        max_lag = longest - 1
    var = float(np.mean(r * r))
    lags = np.arange(max_lag + 1)
    acf = np.zeros(max_lag + 1)
    npairs = np.zeros(max_lag + 1, dtype=np.int64)
    acf[0] = 1.0
    npairs[0] = r.size
    for h in range(1, max_lag + 1):
        pos = np.searchsorted(ks, ks + h)
        pos_c = np.minimum(pos, ks.size - 1)
        hit = (pos < ks.size) & (ks[pos_c] == ks + h)
        npairs[h] = int(np.count_nonzero(hit))
        if npairs[h] > 0 and var > 0:
            acf[h] = float(np.mean(rs[hit] * rs[pos_c[hit]])) / var
        else:
            acf[h] = np.nan
    pacf = durbin_levinson(np.nan_to_num(acf))
    return Correlogram(lags, acf, pacf, npairs)


def write_residuals_csv(res: ResidualSet, path: str | Path, meta: dict | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plot_id", "year", "easting", "northing", "raw", "normalized"])
        for i in range(res.raw.size):
            w.writerow([res.plot_id[i], int(res.year[i]), repr(float(res.easting[i])),
                        repr(float(res.northing[i])), repr(float(res.raw[i])), repr(float(res.normalized[i]))])


def write_variogram_csv(v: Semivariogram, path: str | Path, meta: dict | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        for k, val in (meta or {}).items():
            fh.write(f"# {k}: {val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center_m", "gamma", "n_pairs"])
        for c, g, n in zip(v.center, v.gamma, v.count):
            w.writerow([repr(float(c)), "NA" if np.isnan(g) else repr(float(g)), int(n)])


def write_correlogram_csv(c: Correlogram, path: str | Path, meta: dict | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        for k, val in (meta or {}).items():
            fh.write(f"# {k}: {val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lag", "acf", "pacf", "n_pairs", "band"])
        for h, a, p, n, b in zip(c.lags, c.acf, c.pacf, c.n_pairs, c.band):
            w.writerow([int(h), "NA" if np.isnan(a) else repr(float(a)), repr(float(p)), int(n), repr(float(b))])
