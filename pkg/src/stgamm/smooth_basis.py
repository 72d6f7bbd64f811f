"""Penalized regression spline bases.

Three constructions are provided:

* :class:`CubicRegressionSpline` -- natural cubic spline parameterized by its
  values at the knots, with the integrated squared second derivative as
  penalty.
* :class:`ThinPlateRegressionSpline` -- low-rank 2-D thin plate spline
  (m = 2), obtained by eigen-truncation of the radial kernel restricted to the
  space orthogonal to the linear polynomials.
* :class:`TensorProductSmooth` -- row-wise Kronecker product of a spatial
  TPRS and a temporal CRS margin, with one penalty per margin.

:class:`ModelDesign` assembles the intercept, an age smooth and a
space-time smooth into one model matrix with sum-to-zero constraints and
stores everything needed to rebuild prediction matrices for new data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

DEFAULT_K_SPACE = 25
DEFAULT_K_TIME = 20
DEFAULT_K_AGE = 10
DEFAULT_MAX_KNOTS = 2000
DEFAULT_MAX_TENSOR_DIM = 2000


class BasisError(ValueError):
    pass


def _as_list(a):
    return np.asarray(a, dtype=float).tolist()


# --------------------------------------------------------------------------
# cubic regression spline


class CubicRegressionSpline:
    """Natural cubic spline with coefficients equal to the values at the knots.

    Second derivatives at the knots are ``F @ beta`` with zero second
    derivative at both end knots.  Beyond the end knots the spline is
    continued linearly.
    """

    kind = "CRS"
    null_space_dim = 2

    def __init__(self, knots):
        knots = np.asarray(knots, dtype=float)
        if knots.ndim != 1 or knots.size < 3:
            raise BasisError("a cubic regression spline needs at least 3 knots")
        if np.any(np.diff(knots) <= 0):
            raise BasisError("knots must be strictly increasing")
        self.knots = knots
        k = knots.size
        h = np.diff(knots)
        D = np.zeros((k - 2, k))
        B = np.zeros((k - 2, k - 2))
        for i in range(k - 2):
            D[i, i] = 1.0 / h[i]
            D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
            D[i, i + 2] = 1.0 / h[i + 1]
            B[i, i] = (h[i] + h[i + 1]) / 3.0
            if i < k - 3:
                B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
        BinvD = linalg.solve(B, D, assume_a="pos")
        self.F = np.vstack([np.zeros(k), BinvD, np.zeros(k)])
        S = D.T @ BinvD
        self.S = 0.5 * (S + S.T)

    @property
    def k(self) -> int:
        return self.knots.size

    @classmethod
    def from_data(cls, x, k: int) -> "CubicRegressionSpline":
        if k < 3:
            raise BasisError("k must be at least 3")
        xu = np.unique(np.asarray(x, dtype=float))
        if xu.size < k:
            raise BasisError(
                f"only {xu.size} distinct covariate values for k={k}; reduce k to at most {xu.size}"
            )
        knots = np.quantile(xu, np.linspace(0.0, 1.0, k))
        knots[0], knots[-1] = xu[0], xu[-1]
        return cls(knots)

    def evaluate(self, x, deriv: int = 0) -> np.ndarray:
        """Basis matrix at ``x`` (``deriv`` 0, 1 or 2)."""
        x = np.asarray(x, dtype=float)
        kn = self.knots
        k = kn.size
        n = x.size
        X = np.zeros((n, k))
        j = np.clip(np.searchsorted(kn, x, side="right") - 1, 0, k - 2)
        lo, hi = kn[j], kn[j + 1]
        h = hi - lo
        rows = np.arange(n)
        inside = (x >= kn[0]) & (x <= kn[-1])
        xi = np.where(inside, x, np.clip(x, kn[0], kn[-1]))
        am = (hi - xi) / h
        ap = (xi - lo) / h
        if deriv == 0:
            cm = ((hi - xi) ** 3 / h - h * (hi - xi)) / 6.0
            cp = ((xi - lo) ** 3 / h - h * (xi - lo)) / 6.0
            X[rows, j] += am
            X[rows, j + 1] += ap
            X += cm[:, None] * self.F[j] + cp[:, None] * self.F[j + 1]
            out = ~inside
            if np.any(out):
                d1 = self.evaluate(xi[out], deriv=1)
                X[out] += (x[out] - xi[out])[:, None] * d1
        elif deriv == 1:
            dm = (-3.0 * (hi - xi) ** 2 / h + h) / 6.0
            dp = (3.0 * (xi - lo) ** 2 / h - h) / 6.0
            X[rows, j] -= 1.0 / h
            X[rows, j + 1] += 1.0 / h
            X += dm[:, None] * self.F[j] + dp[:, None] * self.F[j + 1]
        elif deriv == 2:
            X += (am * inside)[:, None] * self.F[j] + (ap * inside)[:, None] * self.F[j + 1]
        else:
            raise BasisError("deriv must be 0, 1 or 2")
        return X

    def to_dict(self):
        return {"kind": self.kind, "knots": _as_list(self.knots)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["knots"])


def crs_basis(x, k: int):
    """Build a CRS on the data ``x`` and return it with its basis matrix."""
    basis = CubicRegressionSpline.from_data(x, k)
    return basis, basis.evaluate(x)


# --------------------------------------------------------------------------
# thin plate regression spline


def tps_kernel(r):
    """Radial kernel r^2 log(r) / (8 pi) for d = 2, m = 2 (zero at r = 0)."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** 2 * np.log(r[pos]) / (8.0 * np.pi)
    return out


def farthest_point_subsample(points: np.ndarray, m: int, seed: int = 0) -> np.ndarray:
    """Indices of ``m`` points chosen greedily to be mutually far apart."""
    n = points.shape[0]
    if m >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return np.sort(np.asarray(chosen))


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    s = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    s[s == 0] = 1.0
    return vecs * s


class ThinPlateRegressionSpline:
    """Rank-``k`` thin plate regression spline in two dimensions.

    Coordinates are standardized (centroid removed, divided by the RMS
    distance to the centroid) before the kernel is evaluated.  The
    polynomial side conditions are imposed first by projecting the kernel
    matrix onto the orthogonal complement of ``[1, e, n]``; the projected
    matrix is eigen-decomposed and its ``k - 3`` leading eigenvectors are kept.
    Columns are ordered penalized first, then ``1, e, n``.
    """

    kind = "TPRS2D"
    null_space_dim = 3

    def __init__(self, center, scale, knots, W, eigenvalues):
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.knots = np.asarray(knots, dtype=float).reshape(-1, 2)
        self.W = np.asarray(W, dtype=float).reshape(self.knots.shape[0], -1)
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        k = self.eigenvalues.size + 3
        self.S = np.zeros((k, k))
        self.S[: k - 3, : k - 3] = np.diag(self.eigenvalues)

    @property
    def k(self) -> int:
        return self.eigenvalues.size + 3

    @classmethod
    def from_data(cls, sites, k: int, max_knots: int = DEFAULT_MAX_KNOTS, seed: int = 0):
        sites = np.asarray(sites, dtype=float).reshape(-1, 2)
        if k < 4:
            raise BasisError("k must be at least 4 for a 2-D thin plate spline")
        if not np.all(np.isfinite(sites)):
            raise BasisError("sites must be finite")
        uniq = np.unique(sites, axis=0)
        if uniq.shape[0] < k:
            raise BasisError(f"k={k} exceeds the {uniq.shape[0]} distinct sites available")
        center = uniq.mean(axis=0)
        scale = float(np.sqrt(np.mean(np.sum((uniq - center) ** 2, axis=1))))
        if scale == 0.0:
            raise BasisError("all sites coincide")
        std = (uniq - center) / scale
        if std.shape[0] > max_knots:
            std = std[farthest_point_subsample(std, max_knots, seed)]
        m = std.shape[0]
        T = np.column_stack([np.ones(m), std])
        Q, _ = linalg.qr(T)
        Z = Q[:, 3:]
        r = np.sqrt(np.sum((std[:, None, :] - std[None, :, :]) ** 2, axis=2))
        E = tps_kernel(r)
        Ez = Z.T @ E @ Z
        vals, vecs = linalg.eigh(0.5 * (Ez + Ez.T))
        order = np.lexsort((np.arange(vals.size), -vals))[: k - 3]
        vals = vals[order]
        if np.any(vals <= 0):
            raise BasisError("projected thin plate kernel is not positive definite on the kept space")
        W = Z @ _fix_signs(vecs[:, order])
        return cls(center, scale, std, W, vals)

    def standardize(self, sites) -> np.ndarray:
        sites = np.asarray(sites, dtype=float).reshape(-1, 2)
        return (sites - self.center) / self.scale

    def evaluate(self, sites) -> np.ndarray:
        s = self.standardize(sites)
        r = np.sqrt(np.sum((s[:, None, :] - self.knots[None, :, :]) ** 2, axis=2))
        return np.column_stack([tps_kernel(r) @ self.W, np.ones(s.shape[0]), s])

    def to_dict(self):
        return {
            "kind": self.kind,
            "center": _as_list(self.center),
            "scale": self.scale,
            "knots": _as_list(self.knots),
            "W": _as_list(self.W),
            "eigenvalues": _as_list(self.eigenvalues),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["scale"], d["knots"], d["W"], d["eigenvalues"])


def tprs_basis(sites, k: int, max_knots: int = DEFAULT_MAX_KNOTS, seed: int = 0):
    basis = ThinPlateRegressionSpline.from_data(sites, k, max_knots=max_knots, seed=seed)
    return basis, basis.evaluate(sites)


# --------------------------------------------------------------------------
# tensor product


def row_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product."""
    n = A.shape[0]
    return (A[:, :, None] * B[:, None, :]).reshape(n, A.shape[1] * B.shape[1])


class TensorProductSmooth:
    """Space x time tensor product with penalties ``S_s (x) I`` and ``I (x) S_t``."""

    kind = "TE"

    def __init__(self, space: ThinPlateRegressionSpline, time: CubicRegressionSpline,
                 max_dim: int = DEFAULT_MAX_TENSOR_DIM):
        if space.k * time.k > max_dim:
            raise BasisError(
                f"tensor dimension {space.k}*{time.k}={space.k * time.k} exceeds max_dim={max_dim}"
            )
        self.space = space
        self.time = time

    @property
    def k(self) -> int:
        return self.space.k * self.time.k

    @property
    def penalties(self) -> list[np.ndarray]:
        Is = np.eye(self.space.k)
        It = np.eye(self.time.k)
        return [np.kron(self.space.S, It), np.kron(Is, self.time.S)]

    def evaluate(self, easting, northing, year) -> np.ndarray:
        Xs = self.space.evaluate(np.column_stack([easting, northing]))
        Xt = self.time.evaluate(year)
        return row_kron(Xs, Xt)

    def to_dict(self):
        return {"kind": self.kind, "space": self.space.to_dict(), "time": self.time.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(
            ThinPlateRegressionSpline.from_dict(d["space"]),
            CubicRegressionSpline.from_dict(d["time"]),
            max_dim=np.inf,
        )


def tensor_product(space: ThinPlateRegressionSpline, time: CubicRegressionSpline,
                   max_dim: int = DEFAULT_MAX_TENSOR_DIM) -> TensorProductSmooth:
    return TensorProductSmooth(space, time, max_dim=max_dim)


# --------------------------------------------------------------------------
# identifiability constraint


def householder_vector(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    norm = linalg.norm(c)
    if norm == 0.0:
        raise BasisError("centering constraint is vacuous: all column sums are zero")
    v = c.copy()
    v[0] += norm if c[0] >= 0 else -norm
    return v


def constrain_columns(B: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``B @ Z`` where ``Z`` is the Householder reflector for ``v`` minus its first column."""
    Bv = B @ v
    return (B - np.outer(Bv, (2.0 / (v @ v)) * v))[:, 1:]


def constrain_penalty(S: np.ndarray, v: np.ndarray) -> np.ndarray:
    H = np.eye(v.size) - (2.0 / (v @ v)) * np.outer(v, v)
    out = (H @ S @ H)[1:, 1:]
    return 0.5 * (out + out.T)


def apply_centering_constraint(B: np.ndarray, penalties):
    """Constrain a term to sum to zero over the rows of ``B``.

    Returns the reduced basis, transformed penalties and the Householder
    vector that defines the transform.
    """
    v = householder_vector(B.sum(axis=0))
    Bc = constrain_columns(B, v)
    if not np.any(np.abs(Bc) > 1e-12 * max(np.abs(B).max(), 1.0)):
        raise BasisError("term vanishes after centering: basis is constant on the training rows")
    return Bc, [constrain_penalty(S, v) for S in penalties], v


# --------------------------------------------------------------------------
# full model design


@dataclass
class SmoothConfig:
    k_space: int = DEFAULT_K_SPACE
    k_time: int = DEFAULT_K_TIME
    k_age: int = DEFAULT_K_AGE
    include_age: bool = True
    include_space_time: bool = True
    max_knots: int = DEFAULT_MAX_KNOTS
    max_tensor_dim: int = DEFAULT_MAX_TENSOR_DIM
    knot_seed: int = 0


@dataclass
class Term:
    """A constrained smooth occupying a contiguous block of model columns."""

    name: str
    smooth: object
    v: np.ndarray
    penalty_scale: list[float]
    start: int
    null_dim: int

    @property
    def ncol(self) -> int:
        return self.smooth.k - 1

    @property
    def cols(self) -> slice:
        return slice(self.start, self.start + self.ncol)

    def raw_basis(self, data) -> np.ndarray:
        if isinstance(self.smooth, TensorProductSmooth):
            return self.smooth.evaluate(data["easting"], data["northing"], data["year"])
        return self.smooth.evaluate(data["age"])

    def basis(self, data) -> np.ndarray:
        return constrain_columns(self.raw_basis(data), self.v)

    def raw_penalties(self) -> list[np.ndarray]:
        if isinstance(self.smooth, TensorProductSmooth):
            return self.smooth.penalties
        return [self.smooth.S]

    def penalties(self) -> list[np.ndarray]:
        return [constrain_penalty(S, self.v) / sc
                for S, sc in zip(self.raw_penalties(), self.penalty_scale)]


@dataclass
class ModelDesign:
    """Intercept plus constrained smooth terms; rebuilds model matrices."""

    terms: list[Term]
    ranges: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        self._penalty_cache = None

    @property
    def ncol(self) -> int:
        return 1 + sum(t.ncol for t in self.terms)

    @property
    def column_names(self) -> list[str]:
        names = ["(Intercept)"]
        for t in self.terms:
            names += [f"{t.name}.{j + 1}" for j in range(t.ncol)]
        return names

    def penalty_blocks(self) -> list[tuple[int, slice, np.ndarray]]:
        """(term index, column slice, block matrix) for every penalty."""
        if self._penalty_cache is None:
            out = []
            for ti, t in enumerate(self.terms):
                for S in t.penalties():
                    out.append((ti, t.cols, S))
            self._penalty_cache = out
        return self._penalty_cache

    def full_penalties(self) -> list[np.ndarray]:
        p = self.ncol
        mats = []
        for _, sl, S in self.penalty_blocks():
            F = np.zeros((p, p))
            F[sl, sl] = S
            mats.append(F)
        return mats

    @property
    def n_penalties(self) -> int:
        return len(self.penalty_blocks())

    def model_matrix(self, data) -> np.ndarray:
        data = _columns(data)
        n = len(data["year"])
        blocks = [np.ones((n, 1))]
        for t in self.terms:
            blocks.append(t.basis(data))
        return np.hstack(blocks)

    def extrapolation_flags(self, data) -> np.ndarray:
        data = _columns(data)
        flag = np.zeros(len(data["year"]), dtype=bool)
        for key, (lo, hi) in self.ranges.items():
            v = np.asarray(data[key], dtype=float)
            flag |= (v < lo) | (v > hi)
        return flag

    def term_names(self) -> list[str]:
        return [t.name for t in self.terms]

    def to_dict(self):
        return {
            "ranges": {k: list(map(float, v)) for k, v in self.ranges.items()},
            "terms": [
                {
                    "name": t.name,
                    "smooth": t.smooth.to_dict(),
                    "v": _as_list(t.v),
                    "penalty_scale": [float(s) for s in t.penalty_scale],
                    "start": t.start,
                    "null_dim": t.null_dim,
                }
                for t in self.terms
            ],
        }

    @classmethod
    def from_dict(cls, d):
        terms = []
        for td in d["terms"]:
            sd = td["smooth"]
            smooth = TensorProductSmooth.from_dict(sd) if sd["kind"] == "TE" else CubicRegressionSpline.from_dict(sd)
            terms.append(Term(td["name"], smooth, np.asarray(td["v"], dtype=float),
                              list(td["penalty_scale"]), td["start"], td["null_dim"]))
        return cls(terms, {k: list(v) for k, v in d["ranges"].items()})


REQUIRED_COLUMNS = ("easting", "northing", "year", "age")


def _columns(data) -> dict:
    """Accept a PlotTable, dict of arrays, or structured array."""
    out = {}
    for key in REQUIRED_COLUMNS:
        try:
            v = data[key] if isinstance(data, dict) else getattr(data, key)
        except (KeyError, AttributeError):
            raise BasisError(f"missing covariate {key!r}")
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if not np.all(np.isfinite(v)):
            raise BasisError(f"covariate {key!r} has missing or non-finite values")
        out[key] = v
    return out


def _scale_penalty(S: np.ndarray, X: np.ndarray) -> float:
    # one-norm of S relative to squared infinity-norm of X
    maxx = np.linalg.norm(X, np.inf) ** 2
    return float(np.linalg.norm(S, 1) / maxx)


def build_design(data, config: SmoothConfig | None = None) -> ModelDesign:
    """Construct bases, constraints and penalties on the training data."""
    config = config or SmoothConfig()
    cols = _columns(data)
    terms: list[Term] = []
    start = 1
    specs = []
    if config.include_age:
        specs.append(("s(age)", CubicRegressionSpline.from_data(cols["age"], config.k_age), 1))
    if config.include_space_time:
        space = ThinPlateRegressionSpline.from_data(
            np.column_stack([cols["easting"], cols["northing"]]), config.k_space,
            max_knots=config.max_knots, seed=config.knot_seed,
        )
        time = CubicRegressionSpline.from_data(cols["year"], config.k_time)
        specs.append(("te(e,n,year)", tensor_product(space, time, config.max_tensor_dim), 5))
    for name, smooth, null_dim in specs:
        probe = Term(name, smooth, np.zeros(smooth.k), [], start, null_dim)
        B = probe.raw_basis(cols)
        Bc, pens, v = apply_centering_constraint(B, probe.raw_penalties())
        scales = [_scale_penalty(S, Bc) for S in pens]
        terms.append(Term(name, smooth, v, scales, start, null_dim))
        start += smooth.k - 1
    ranges = {
        "easting": [float(cols["easting"].min()), float(cols["easting"].max())],
        "northing": [float(cols["northing"].min()), float(cols["northing"].max())],
        "year": [float(cols["year"].min()), float(cols["year"].max())],
        "age": [float(cols["age"].min()), float(cols["age"].max())],
    }
    return ModelDesign(terms, ranges)


def prediction_matrix(design: ModelDesign, newdata, return_flags: bool = False):
    """Linear-predictor matrix for new rows; optionally per-row extrapolation flags."""
    M = design.model_matrix(newdata)
    if return_flags:
        return M, design.extrapolation_flags(newdata)
    return M
