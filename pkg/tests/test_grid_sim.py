from dataclasses import replace

import numpy as np
import pytest

from stgamm.arma import arma11_acf
from stgamm.grid_sim import (
    GridSimError, SimProtocol, build_universe, lattice_membership, mpe_per_plot, mpe_per_year, rmpe_percent,
    run_grid_examination, simulate_response, subsample_grid, write_plot_rmpe_csv, write_report_csv,
)
from stgamm.survey_data import PlotTable
from stgamm.synthetic import SyntheticConfig, synthesize_plots


class TestMeasures:
    def test_perfect(self):
        assert np.array_equal(mpe_per_year(np.full((3, 4), 0.2), np.full(4, 0.2)), np.zeros(4))

    def test_hand_case(self):
        mpe = mpe_per_year([[0.31], [0.27]], [0.30])
        assert mpe[0] == pytest.approx(0.0005, abs=1e-15)
        assert rmpe_percent(mpe)[0] == pytest.approx(2.2360679775, abs=1e-9)

    def test_monte_carlo_rmpe(self):
        err = np.random.default_rng(0).normal(0, 0.02, (10**4, 3))
        assert np.allclose(rmpe_percent(mpe_per_year(0.3 + err, np.full(3, 0.3))), 2.0, atol=0.05)

    def test_constant_bias(self):
        mu = np.random.default_rng(1).uniform(0.1, 0.4, (5, 3))
        assert np.allclose(mpe_per_plot(np.stack([mu + 0.03] * 4), mu), 0.03 ** 2, rtol=0, atol=1e-15)

    def test_year_mpe_from_plot_draws(self):
        r = np.random.default_rng(2)
        draws, mu = r.uniform(0, 1, (6, 10, 4)), r.uniform(0, 1, (10, 4))
        direct = np.mean((draws.mean(axis=1) - mu.mean(axis=0)) ** 2, axis=0)
        assert np.allclose(mpe_per_year(draws.mean(axis=1), mu.mean(axis=0)), direct, rtol=0, atol=1e-12)

    def test_pooling_is_average(self):
        r = np.random.default_rng(3)
        a, b, mu = r.normal(size=(7, 5)), r.normal(size=(7, 5)), r.normal(size=5)
        pooled = mpe_per_year(np.vstack([a, b]), mu)
        assert np.allclose(pooled, 0.5 * (mpe_per_year(a, mu) + mpe_per_year(b, mu)), rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mpe_per_year(np.zeros((2, 3)), np.zeros(4))


@pytest.fixture(scope="module")
def universe():
    cfg = SyntheticConfig(n_side=8, n_years=4, first_year=2006, denser_region="R4")
    return synthesize_plots(cfg, seed=3).table


class TestGrids:
    def test_base16_quarter_of_lattice(self, universe):
        u = universe.subset(universe.grid_tag != "denser")
        m = subsample_grid(u, "base16", strict=True)
        assert m.sum() == len(u) // 4
        anchor = (u.easting.min(), u.northing.min())
        assert np.array_equal(m, lattice_membership(u.easting, u.northing, 16000.0, anchor))

    def test_nested(self, universe):
        b, d, x = (subsample_grid(universe, g) for g in ("base16", "dense8", "densification"))
        assert np.all(d[b]) and np.all(x[d]) and x.all()

    def test_densification_of_one_region(self, universe):
        one = universe.subset(universe.region_tag == "R4")
        assert subsample_grid(one, "densification").all()

    def test_wrong_tag_detected(self, universe):
        bad = universe.subset(np.arange(len(universe)))
        bad.grid_tag = bad.grid_tag.copy()
        i = np.flatnonzero(bad.grid_tag == "dense8")[0]
        bad.grid_tag[bad.plot_id == bad.plot_id[i]] = "base16"
        with pytest.raises(GridSimError, match=str(bad.plot_id[i])):
            subsample_grid(bad, "base16", strict=True)
        with pytest.warns(UserWarning):
            subsample_grid(bad, "base16")

    def test_universe_frozen_ages(self, universe):
        u = build_universe(universe, 2007, excluded_regions=("R1",))
        assert "R1" not in set(u.region_tag)
        for p in np.unique(u.plot_id)[:5]:
            sel = u.plot_id == p
            assert np.unique(u.age[sel]).size == 1 and sel.sum() == 4


class TestSimulation:
    def test_deterministic_truth(self, small_model, small_data):
        m = replace(small_model, Vp=np.zeros_like(small_model.Vp), sigma2=0.0)
        y = simulate_response(m, small_data.table, nsim=2, seed=0)
        assert np.array_equal(y[0], small_model.predict(small_data.table))
        assert np.array_equal(y[0], y[1])

    def test_truncation(self, small_model, small_data):
        coef = small_model.coefficients.copy()
        coef[0] = 7.0
        m = replace(small_model, coefficients=coef, sigma2=1.0)
        y = simulate_response(m, small_data.table, nsim=1, seed=0)
        assert np.any(y == 1.0) and np.all((y >= 0) & (y <= 1))

    def test_lag_one_autocorrelation(self, small_model):
        n_plots = 10**4
        u = PlotTable(plot_id=np.repeat(np.arange(n_plots).astype(str), 2), easting=np.full(2 * n_plots, 3.52e6),
                      northing=np.full(2 * n_plots, 5.32e6), year=np.tile([1998, 1999], n_plots),
                      age=np.full(2 * n_plots, 60.0), y=np.zeros(2 * n_plots), n_trees=np.ones(2 * n_plots),
                      species=["spruce"] * (2 * n_plots), region_tag=["R1"] * (2 * n_plots),
                      grid_tag=["base16"] * (2 * n_plots))
        m = replace(small_model, Vp=np.zeros_like(small_model.Vp), sigma2=1e-4)
        y = simulate_response(m, u, nsim=1, seed=5)[0]
        e = (y - small_model.predict(u)).reshape(n_plots, 2)
        r1 = np.corrcoef(e[:, 0], e[:, 1])[0, 1]
        assert r1 == pytest.approx(arma11_acf(m.phi, m.theta, [1])[0], abs=0.02)

    def test_thread_independent(self, small_model, small_data):
        a = simulate_response(small_model, small_data.table, 3, seed=2)
        b = simulate_response(small_model, small_data.table, 3, seed=2, threads=3)
        assert np.array_equal(a, b)


class TestExamination:
    def test_noise_free_truth(self, small_model, small_data):
        m = replace(small_model, Vp=np.zeros_like(small_model.Vp), sigma2=1e-8)
        u = build_universe(small_data.table, 2001)
        exam = run_grid_examination(m, u, SimProtocol(nsim=1, grids=("dense8",), window=(1996, 2001)))
        r = exam["dense8"]
        assert r.rmpe_t.max() < 0.01 and r.n_gt5 == 0 and r.n_failed == 0

    def test_failures_abort(self, small_model, small_data, monkeypatch):
        import stgamm.grid_sim as gs

        def boom(*a, **k):
            raise gs.GammError("no")

        monkeypatch.setattr(gs, "fit_gamm", boom)
        with pytest.raises(GridSimError, match="refits failed"):
            run_grid_examination(small_model, build_universe(small_data.table), SimProtocol(nsim=2))

    def test_report_files(self, small_model, small_data, tmp_path):
        u = build_universe(small_data.table, 2001)
        exam = run_grid_examination(small_model, u, SimProtocol(nsim=1, window=(1996, 2001)))
        for r in exam.reports.values():
            assert r.n_gt5 <= r.n_points == 64
            assert r.rmpe_t_range[0] <= r.rmpe_t_median <= r.rmpe_t_range[1]
        write_report_csv(exam, tmp_path / "r.csv", species="spruce")
        write_plot_rmpe_csv(exam, tmp_path / "p.csv")
        head = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert head.startswith("species,grid,rmpe_t_median,rmpe_t_min,rmpe_t_max,rmpe_it_median,rmpe_it_min,"
                               "rmpe_it_max,n_gt5,n_points")
        assert len((tmp_path / "p.csv").read_text().splitlines()) == 1 + 2 * len(u)

    def test_protocol_validation(self):
        with pytest.raises(ValueError):
            SimProtocol(nsim=0)
        with pytest.raises(ValueError):
            SimProtocol(approach="III")
        assert SimProtocol(approach="II").grids == ("densification", "base16")
