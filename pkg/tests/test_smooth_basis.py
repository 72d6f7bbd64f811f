import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from stgamm.gamm_engine import OptimizerConfig, fit_gamm
from stgamm.smooth_basis import (
    BasisError, CubicRegressionSpline, ModelDesign, SmoothConfig, ThinPlateRegressionSpline, apply_centering_constraint,
    build_design, crs_basis, prediction_matrix, row_kron, tensor_product, tprs_basis, tps_kernel,
)


def psd_ok(S, tol=1e-10):
    scale = max(np.abs(S).max(), 1e-300)
    sym = np.abs(S - S.T).max() <= 1e-12 * scale
    return sym and np.linalg.eigvalsh(S).min() >= -tol * np.linalg.norm(S, 2)


class TestCubicRegressionSpline:
    def test_identity_at_knots(self, rng):
        sp, _ = crs_basis(rng.uniform(0, 10, 200), 7)
        assert np.allclose(sp.evaluate(sp.knots), np.eye(7), atol=1e-14)

    def test_linear_unpenalized(self, rng):
        sp, _ = crs_basis(rng.uniform(-3, 5, 100), 9)
        beta = 2.0 - 0.7 * sp.knots
        assert abs(beta @ sp.S @ beta) < 1e-10
        x = np.linspace(-6, 8, 50)  # includes linear extrapolation
        assert np.allclose(sp.evaluate(x) @ beta, 2.0 - 0.7 * x, atol=1e-12)

    def test_curvature_penalty_matches_quadrature(self):
        sp = CubicRegressionSpline([0.0, 1.0, 2.0])
        beta = sp.knots ** 2
        quad, _ = integrate.quad(lambda t: float(sp.evaluate([t], deriv=2)[0] @ beta) ** 2, 0, 2, points=[1.0])
        # the natural spline through (0,0),(1,1),(2,4) has f'' = 3x on [0,1], 3(2-x) on [1,2]
        assert quad == pytest.approx(6.0, abs=1e-10)
        assert beta @ sp.S @ beta == pytest.approx(quad, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 15), st.integers(0, 2**31 - 1))
    def test_penalty_equals_integral(self, k, seed):
        r = np.random.default_rng(seed)
        sp = CubicRegressionSpline(np.sort(r.choice(np.arange(100), size=k, replace=False)).astype(float))
        beta = r.standard_normal(k)
        total = 0.0
        for a, b in zip(sp.knots[:-1], sp.knots[1:]):
            total += integrate.quad(lambda t: float(sp.evaluate([t], deriv=2)[0] @ beta) ** 2, a, b)[0]
        assert beta @ sp.S @ beta == pytest.approx(total, rel=1e-9, abs=1e-12)

    def test_partition_of_unity(self, rng):
        sp, B = crs_basis(rng.uniform(0, 1, 300), 10)
        assert np.allclose(B.sum(axis=1), 1.0, atol=1e-13)
        assert psd_ok(sp.S)

    def test_too_few_values(self):
        with pytest.raises(BasisError, match="reduce k"):
            crs_basis([1, 2, 3, 3, 2], 5)

    def test_knots_at_quantiles_of_unique_values(self):
        sp, _ = crs_basis(np.r_[np.zeros(50), np.arange(1, 11)], 3)
        assert np.allclose(sp.knots, [0.0, 5.0, 10.0])


class TestThinPlate:
    def test_kernel_zero_at_one_and_origin(self):
        assert tps_kernel(1.0) == 0.0 and tps_kernel(0.0) == 0.0
        assert tps_kernel(2.0) == pytest.approx(4 * np.log(2) / (8 * np.pi))

    def test_null_space_unpenalized(self, rng):
        sp, X = tprs_basis(rng.uniform(0, 1, (60, 2)), 12)
        beta = np.zeros(12)
        beta[-3:] = rng.standard_normal(3)
        assert beta @ sp.S @ beta == 0.0
        assert psd_ok(sp.S) and np.linalg.matrix_rank(sp.S) == 9

    def test_full_rank_reproduces_linear(self, rng):
        sites = rng.uniform(0, 100, (40, 2))
        sp, X = tprs_basis(sites, 40)
        y = sites[:, 0] + 2 * sites[:, 1]
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        assert np.max(np.abs(X @ beta - y)) < 1e-8

    def test_k_too_large(self, rng):
        with pytest.raises(BasisError):
            tprs_basis(rng.uniform(0, 1, (5, 2)), 6)

    def test_scale_and_translation_invariant(self, rng):
        sites = rng.uniform(0, 1, (80, 2))
        _, X1 = tprs_basis(sites, 15)
        _, X2 = tprs_basis(sites * 1000 + 3.5e6, 15)
        assert np.allclose(X1, X2, atol=1e-9)

    def test_knot_thinning_is_deterministic(self, rng):
        sites = rng.uniform(0, 1, (300, 2))
        a = ThinPlateRegressionSpline.from_data(sites, 10, max_knots=50)
        b = ThinPlateRegressionSpline.from_data(sites, 10, max_knots=50)
        assert a.knots.shape == (50, 2) and np.array_equal(a.W, b.W)


class TestTensor:
    def make(self, rng, ks=6, kt=5, n=200):
        e, nn = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        yr = rng.integers(1990, 2010, n).astype(float)
        sp = ThinPlateRegressionSpline.from_data(np.column_stack([e, nn]), ks)
        tm = CubicRegressionSpline.from_data(yr, kt)
        return tensor_product(sp, tm), (e, nn, yr)

    def test_default_dimensions(self, rng):
        te, _ = self.make(rng, 25, 20, 400)
        assert te.k == 500 and len(te.penalties) == 2
        assert all(P.shape == (500, 500) and psd_ok(P) for P in te.penalties)

    def test_time_constant_function_unpenalized_in_time(self, rng):
        te, _ = self.make(rng)
        beta = np.kron(rng.standard_normal(6), np.ones(5))
        assert abs(beta @ te.penalties[1] @ beta) < 1e-10
        assert beta @ te.penalties[0] @ beta > 0

    def test_row_kron(self, rng):
        A, B = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        R = row_kron(A, B)
        for i in range(4):
            assert np.allclose(R[i], np.kron(A[i], B[i]))

    def test_dimension_guard(self, rng):
        te, _ = self.make(rng)
        with pytest.raises(BasisError, match="exceeds"):
            tensor_product(te.space, te.time, max_dim=10)


class TestCentering:
    def test_sums_and_dimension(self, rng):
        sp, B = crs_basis(rng.uniform(0, 1, 100), 8)
        Bc, (Sc,), v = apply_centering_constraint(B, [sp.S])
        assert Bc.shape == (100, 7)
        assert np.all(np.abs(Bc.sum(axis=0)) < 1e-8)
        assert psd_ok(Sc)

    def test_constant_term_rejected(self):
        with pytest.raises(BasisError):
            apply_centering_constraint(np.ones((10, 1)), [np.zeros((1, 1))])

    def test_constrained_fit_equals_unconstrained_pseudoinverse(self, rng):
        n = 120
        age = rng.uniform(20, 140, n)
        y = 0.3 + 0.1 * np.sin(age / 20) + 0.02 * rng.standard_normal(n)
        data = {"easting": np.zeros(n), "northing": np.zeros(n), "year": np.zeros(n), "age": age,
                "y": y, "n_trees": np.ones(n), "plot_id": np.arange(n).astype(str)}
        cfg = SmoothConfig(k_age=8, include_space_time=False)
        lam = 0.7
        fit = fit_gamm(data, cfg, correlation="none", link="identity", lambdas=[lam])
        design = fit.design
        term = design.terms[0]
        B = term.raw_basis(data)
        X = np.column_stack([np.ones(n), B])
        P = np.zeros((9, 9))
        P[1:, 1:] = lam * term.smooth.S / term.penalty_scale[0]
        beta = np.linalg.pinv(X.T @ X + P) @ (X.T @ y)
        assert np.max(np.abs(X @ beta - fit.predict(data))) < 1e-8


class TestDesign:
    @pytest.fixture
    def design_and_data(self, small_data):
        return build_design(small_data.table, SmoothConfig(k_space=10, k_time=4, k_age=4)), small_data.table

    def test_null_dims(self, design_and_data):
        design, _ = design_and_data
        assert [t.null_dim for t in design.terms] == [1, 5]
        for S in design.full_penalties():
            assert psd_ok(S)

    def test_training_rows_reproduced(self, design_and_data):
        design, t = design_and_data
        M = design.model_matrix(t)
        assert np.array_equal(prediction_matrix(design, t), M)
        assert M.shape == (len(t), 1 + 3 + 39)

    def test_duplicated_row(self, design_and_data):
        design, t = design_and_data
        row = {k: np.repeat(getattr(t, k)[3], 5) for k in ("easting", "northing", "year", "age")}
        M = prediction_matrix(design, row)
        # equal up to BLAS blocking of the last rows
        assert np.max(np.abs(M - M[0])) < 1e-14

    def test_row_local_on_map_grid(self, design_and_data):
        design, t = design_and_data
        g = np.linspace(t.easting.min(), t.easting.max(), 60)
        h = np.linspace(t.northing.min(), t.northing.max(), 60)
        E, N = np.meshgrid(g, h)
        grid = {"easting": E.ravel(), "northing": N.ravel(), "year": np.full(3600, 1998.0),
                "age": np.full(3600, 70.0)}
        M = prediction_matrix(design, grid)
        for i in (0, 1234, 3599):
            one = {k: v[i:i + 1] for k, v in grid.items()}
            assert np.allclose(prediction_matrix(design, one)[0], M[i], rtol=0, atol=1e-12)

    def test_extrapolation_flagged(self, design_and_data):
        design, t = design_and_data
        _, flags = prediction_matrix(design, {"easting": [t.easting[0]] * 2, "northing": [t.northing[0]] * 2,
                                              "year": [1990.0, 1998.0], "age": [70.0, 70.0]}, return_flags=True)
        assert flags.tolist() == [True, False]

    def test_missing_covariate(self, design_and_data):
        design, _ = design_and_data
        with pytest.raises(BasisError, match="age"):
            prediction_matrix(design, {"easting": [0.0], "northing": [0.0], "year": [2000.0]})

    def test_serialization_bit_identical(self, design_and_data):
        design, t = design_and_data
        import json
        back = ModelDesign.from_dict(json.loads(json.dumps(design.to_dict())))
        assert np.array_equal(back.model_matrix(t), design.model_matrix(t))
