"""ARMA(1,1) within-plot error structure.

Errors of plot ``i`` follow ``eps_t = phi * eps_{t-1} + theta * c_{t-1} + c_t``
in calendar years.  Plots may miss years; the correlation between two
observed years is the process autocorrelation at their distance.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg


class ARMAError(ValueError):
    pass


def check_arma(phi: float, theta: float) -> None:
    if not (abs(phi) < 1.0 and abs(theta) < 1.0):
        raise ARMAError(f"ARMA(1,1) requires |phi| < 1 and |theta| < 1, got phi={phi}, theta={theta}")


def arma11_acf(phi: float, theta: float, lags) -> np.ndarray:
    """Autocorrelation rho(h) of a stationary ARMA(1,1) process."""
    check_arma(phi, theta)
    h = np.abs(np.asarray(lags))
    rho1 = (1.0 + phi * theta) * (phi + theta) / (1.0 + 2.0 * phi * theta + theta * theta)
    out = np.where(h == 0, 1.0, 0.0).astype(float)
    pos = h >= 1
    if phi == 0.0:
        out[pos & (h == 1)] = rho1
    else:
        out[pos] = rho1 * phi ** (h[pos] - 1.0)
    return out


def arma11_correlation(phi: float, theta: float, years) -> np.ndarray:
    years = np.asarray(years)
    if years.ndim != 1:
        raise ARMAError("years must be a vector")
    if np.any(np.diff(years) <= 0):
        raise ARMAError("years must be strictly increasing")
    return arma11_acf(phi, theta, years[:, None] - years[None, :])


def build_plot_covariance(phi: float, theta: float, years, n_trees) -> np.ndarray:
    """``D^(1/2) C D^(1/2)`` with ``D = diag(1 / n_trees)``; Var(eps_i) = sigma^2 times this."""
    a = np.asarray(n_trees, dtype=float)
    if np.any(a < 1):
        raise ARMAError("tree counts must be at least 1")
    d = 1.0 / np.sqrt(a)
    return d[:, None] * arma11_correlation(phi, theta, years) * d[None, :]


def simulate_arma11(phi: float, theta: float, n: int, rng: np.random.Generator,
                    burn: int = 200) -> np.ndarray:
    """A unit-variance stationary ARMA(1,1) series of length ``n``."""
    check_arma(phi, theta)
    c = rng.standard_normal(n + burn)
    x = np.empty(n + burn)
    x[0] = c[0]
    for t in range(1, n + burn):
        x[t] = phi * x[t - 1] + theta * c[t - 1] + c[t]
    var = (1.0 + 2.0 * phi * theta + theta * theta) / (1.0 - phi * phi)
    return x[burn:] / np.sqrt(var)


class PlotStructure:
    """Observation rows grouped into plots, and plots grouped by year pattern.

    Plots whose observed years have the same offsets from their first year
    share one correlation matrix, so whitening is done group-wise.
    """

    def __init__(self, plot_id, year):
        plot_id = np.asarray(plot_id).astype(str)
        year = np.asarray(year, dtype=int)
        self.n = plot_id.size
        order = np.lexsort((year, plot_id))
        pid_sorted = plot_id[order]
        yr_sorted = year[order]
        breaks = np.flatnonzero(pid_sorted[1:] != pid_sorted[:-1]) + 1
        starts = np.concatenate([[0], breaks])
        ends = np.concatenate([breaks, [self.n]])
        groups: dict[tuple, list[np.ndarray]] = {}
        for s, e in zip(starts, ends):
            yrs = yr_sorted[s:e]
            if np.any(np.diff(yrs) == 0):
                raise ARMAError(f"plot {pid_sorted[s]!r} has duplicate years")
            key = tuple((yrs - yrs[0]).tolist())
            groups.setdefault(key, []).append(order[s:e])
        self.patterns = [(np.asarray(k), np.vstack(v)) for k, v in sorted(groups.items())]
        self.n_plots = len(starts)

    def correlation_factors(self, phi: float, theta: float):
        """Inverse Cholesky factors and log-determinants per pattern."""
        out = []
        for offsets, _ in self.patterns:
            C = arma11_correlation(phi, theta, offsets)
            L = linalg.cholesky(C, lower=True)
            Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
            out.append((Linv, 2.0 * np.sum(np.log(np.diag(L)))))
        return out

    def whiten(self, phi: float, theta: float, sqrt_w: np.ndarray, *arrays):
        """Apply ``Lambda_i^(-1/2)`` plot by plot to each of ``arrays``.

        ``sqrt_w`` holds the square roots of the diagonal precision weights.
        Returns the whitened arrays (rows stay in place) and
        ``log |Lambda|`` summed over plots.
        """
        white = [np.empty_like(np.asarray(a, dtype=float)) for a in arrays]
        logdet = -2.0 * float(np.sum(np.log(sqrt_w)))
        for (offsets, idx), (Linv, ld) in zip(self.patterns, self.correlation_factors(phi, theta)):
            logdet += idx.shape[0] * ld
            sw = sqrt_w[idx]
            for a, out in zip(arrays, white):
                a = np.asarray(a, dtype=float)
                block = a[idx] * (sw if a.ndim == 1 else sw[..., None])
                if a.ndim == 1:
                    out[idx] = block @ Linv.T
                else:
                    g, T, p = block.shape
                    wide = block.transpose(1, 0, 2).reshape(T, g * p)
                    out[idx] = (Linv @ wide).reshape(T, g, p).transpose(1, 0, 2)
        return white, logdet

    def stack(self, X: np.ndarray) -> list[np.ndarray]:
        """Per pattern, rows of ``X`` (n x q) laid out as a (T, g*q) array for whitening."""
        X = np.asarray(X, dtype=float)
        out = []
        for _, idx in self.patterns:
            g, T = idx.shape
            out.append(np.ascontiguousarray(X[idx].transpose(1, 0, 2).reshape(T, g * X.shape[1])))
        return out

    def whiten_stacked(self, phi: float, theta: float, stacked: list[np.ndarray]):
        """Whiten arrays from :meth:`stack`.

        Returns the whitened rows as one (n x q) array in pattern order (not
        the original row order) and the summed ``log |C_i|`` of the plots.
        """
        parts = []
        logdet = 0.0
        for (_, idx), (Linv, ld), wide in zip(self.patterns, self.correlation_factors(phi, theta), stacked):
            g, T = idx.shape
            logdet += g * ld
            parts.append((Linv @ wide).reshape(T * g, -1))
        return np.vstack(parts) if len(parts) > 1 else parts[0], logdet

    def sample(self, phi: float, theta: float, sd: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One draw of correlated errors with per-row standard deviation ``sd``."""
        eps = np.empty(self.n)
        for offsets, idx in self.patterns:
            C = arma11_correlation(phi, theta, offsets)
            L = linalg.cholesky(C, lower=True)
            e = rng.standard_normal(idx.shape) @ L.T
            eps[idx] = e * sd[idx]
        return eps
