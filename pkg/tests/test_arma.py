import numpy as np
import pytest

from stgamm.arma import (ARMAError, PlotStructure, arma11_acf, arma11_correlation, build_plot_covariance,
                         simulate_arma11)


def test_ar1_special_case():
    assert np.allclose(arma11_acf(0.5, 0.0, [0, 1, 2, 3]), [1, 0.5, 0.25, 0.125], rtol=0, atol=1e-15)


def test_white_noise_is_identity():
    assert np.array_equal(arma11_correlation(0.0, 0.0, [1, 2, 5]), np.eye(3))


def test_ma1_cuts_off():
    rho = arma11_acf(0.0, 0.5, [0, 1, 2])
    assert np.allclose(rho, [1, 0.5 / 1.25, 0])


def test_closed_form_values():
    rho = arma11_acf(0.8, 0.1, [1, 2])
    assert rho[0] == pytest.approx(1.08 * 0.9 / 1.17, abs=1e-15)
    assert rho[0] == pytest.approx(0.8308, abs=5e-5) and rho[1] == pytest.approx(0.6646, abs=5e-5)


def test_empirical_autocorrelation_of_long_series():
    x = simulate_arma11(0.8, 0.1, 10**6, np.random.default_rng(2024))
    x = x - x.mean()
    emp = [np.dot(x[:-h], x[h:]) / np.dot(x, x) for h in (1, 2)]
    assert np.allclose(emp, arma11_acf(0.8, 0.1, [1, 2]), atol=0.01)


def test_gaps_use_true_lag():
    C = arma11_correlation(0.6, 0.2, [2000, 2003])
    assert C[0, 1] == pytest.approx(arma11_acf(0.6, 0.2, [3])[0])


@pytest.mark.parametrize("phi,theta", [(1.0, 0.0), (0.0, -1.0), (1.2, 0.3)])
def test_bounds(phi, theta):
    with pytest.raises(ARMAError):
        arma11_correlation(phi, theta, [1, 2])


def test_years_must_increase():
    with pytest.raises(ARMAError):
        arma11_correlation(0.5, 0.0, [2, 1])


class TestPlotCovariance:
    def test_identity(self):
        assert np.array_equal(build_plot_covariance(0, 0, [1, 2, 3], [1, 1, 1]), np.eye(3))

    def test_single_year(self):
        assert build_plot_covariance(0.5, 0.1, [2000], [4])[0, 0] == 0.25

    def test_sandwich(self):
        L = build_plot_covariance(0.5, 0.0, [1, 2, 3], [1, 4, 1])
        assert L[0, 1] == pytest.approx(0.25, abs=1e-15)
        assert np.allclose(np.diag(L), [1, 0.25, 1])

    def test_rejects_small_counts(self):
        with pytest.raises(ARMAError):
            build_plot_covariance(0.5, 0.0, [1, 2], [1, 0.5])


class TestPlotStructure:
    def test_duplicate_years(self):
        with pytest.raises(ARMAError, match="duplicate"):
            PlotStructure(["a", "a"], [2000, 2000])

    def test_whitening_gives_identity_covariance(self):
        rng = np.random.default_rng(7)
        n_plots, years = 20000, np.array([0, 1, 2, 4])
        pid = np.repeat(np.arange(n_plots), years.size)
        yr = np.tile(years, n_plots)
        alpha = rng.integers(1, 20, pid.size).astype(float)
        st = PlotStructure(pid, yr)
        eps = st.sample(0.7, 0.3, 1.0 / np.sqrt(alpha), rng)
        (white,), _ = st.whiten(0.7, 0.3, np.sqrt(alpha), eps)
        W = white.reshape(n_plots, years.size)
        assert np.allclose(np.cov(W.T, bias=True), np.eye(4), atol=3 / np.sqrt(n_plots))

    def test_whitening_matches_dense_inverse_square_root(self):
        rng = np.random.default_rng(1)
        pid = np.array(["b", "a", "a", "b", "a", "c"])
        yr = np.array([2001, 2003, 2000, 2002, 2001, 2005])
        w = rng.uniform(1, 5, 6)
        x = rng.standard_normal(6)
        st = PlotStructure(pid, yr)
        (wx,), logdet = st.whiten(0.4, -0.2, np.sqrt(w), x)
        quad, ld = 0.0, 0.0
        for p in "abc":
            idx = np.flatnonzero(pid == p)
            idx = idx[np.argsort(yr[idx])]
            Lam = build_plot_covariance(0.4, -0.2, yr[idx], w[idx])
            quad += x[idx] @ np.linalg.solve(Lam, x[idx])
            ld += np.linalg.slogdet(Lam)[1]
        assert wx @ wx == pytest.approx(quad, rel=1e-12)
        assert logdet == pytest.approx(ld, rel=1e-12)
