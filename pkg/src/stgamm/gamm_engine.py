"""Generalized additive mixed model fitting.

The mean model is ``g(mu) = M beta`` with ``g`` the logit (or identity) link;
errors are Gaussian on the response scale with covariance
``sigma^2 * Lambda``, ``Lambda`` block diagonal over plots with ARMA(1,1)
correlation and diagonal weights ``1 / n_trees``.

Fitting alternates a working linearization with restricted maximum
likelihood (REML) estimation of the smoothing parameters and ARMA
parameters in the resulting working linear mixed model, until the
coefficients stop changing.  Within one linearization the REML score is
profiled over ``sigma^2``; its gradient in ``log lambda`` is analytic, the
ARMA directions use central differences on ``artanh`` scale.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, logit

from .arma import PlotStructure, check_arma
from .smooth_basis import ModelDesign, SmoothConfig, build_design

logger = logging.getLogger(__name__)

SCHEMA = "stgamm-model/1"
LOG2PI = np.log(2.0 * np.pi)
ETA_BOUND = 30.0


class GammError(RuntimeError):
    pass


class ConvergenceError(GammError):
    def __init__(self, message, last=None, trace=None):
        super().__init__(message)
        self.last = last
        self.trace = trace or []


class RankDeficiencyError(GammError, ValueError):
    def __init__(self, columns):
        super().__init__(f"unpenalized design is rank deficient; offending columns: {', '.join(columns)}")
        self.columns = list(columns)


class ModelFileError(ValueError):
    pass


# --------------------------------------------------------------------------
# links


class Link:
    name = ""

    def linkinv(self, eta):
        raise NotImplementedError

    def linkfun(self, mu):
        raise NotImplementedError

    def mu_eta(self, eta):
        raise NotImplementedError


class LogitLink(Link):
    name = "logit"

    def linkinv(self, eta):
        return expit(np.clip(eta, -ETA_BOUND, ETA_BOUND))

    def linkfun(self, mu):
        return logit(mu)

    def mu_eta(self, eta):
        mu = self.linkinv(eta)
        return mu * (1.0 - mu)


class IdentityLink(Link):
    name = "identity"

    def linkinv(self, eta):
        return np.asarray(eta, dtype=float)

    def linkfun(self, mu):
        return np.asarray(mu, dtype=float)

    def mu_eta(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))


LINKS = {"logit": LogitLink(), "identity": IdentityLink()}


# --------------------------------------------------------------------------
# working linear mixed model


@dataclass
class OptimizerConfig:
    max_pql_iter: int = 60
    pql_tol: float = 1e-7
    reml_tol: float = 1e-6
    max_outer_iter: int = 300
    fd_step: float = 1e-5
    log_lambda_bounds: tuple[float, float] = (-20.0, 25.0)
    atanh_bound: float = 3.0
    init_phi: float = 0.3
    init_theta: float = 0.0
    # linearizations with the ARMA parameters held at their start values
    warmup_tol: float = 1e-3
    max_warmup_iter: int = 10
    # coefficient change below which the parameters are held fixed
    alternate_tol: float = 1e-5
    accept_grad: float = 1e-3


def _term_spaces(design: ModelDesign):
    """Orthonormal range/null bases of each term's total penalty."""
    blocks = design.penalty_blocks()
    spaces = []
    for ti, t in enumerate(design.terms):
        idx = [j for j, (tj, _, _) in enumerate(blocks) if tj == ti]
        Ssum = sum(blocks[j][2] for j in idx)
        vals, vecs = linalg.eigh(Ssum)
        keep = vals > vals.max() * 1e-9
        null_dim = int(np.sum(~keep))
        if null_dim != t.null_dim:
            raise GammError(f"term {t.name}: penalty null space has dimension {null_dim}, expected {t.null_dim}")
        U = vecs[:, keep]
        spaces.append((t.cols, idx, U, vecs[:, ~keep]))
    return spaces


def null_space_basis(design: ModelDesign) -> tuple[np.ndarray, list[str]]:
    """Orthonormal basis (p x Mp) of the unpenalized coefficient directions."""
    p = design.ncol
    cols = [np.eye(p)[:, :1]]
    names = ["(Intercept)"]
    for (sl, _, _, N), t in zip(_term_spaces(design), design.terms):
        F = np.zeros((p, N.shape[1]))
        F[sl] = N
        cols.append(F)
        names += [f"{t.name}:null{j + 1}" for j in range(N.shape[1])]
    return np.hstack(cols), names


def mixed_model_matrices(design: ModelDesign, M: np.ndarray):
    """Split ``M`` into unpenalized ``X`` and penalized ``Z`` parts (``M [N U]``)."""
    p = design.ncol
    N, _ = null_space_basis(design)
    Us = []
    for sl, _, U, _ in _term_spaces(design):
        F = np.zeros((p, U.shape[1]))
        F[sl] = U
        Us.append(F)
    U = np.hstack(Us) if Us else np.zeros((p, 0))
    return M @ N, M @ U


def check_unpenalized_rank(design: ModelDesign, M: np.ndarray) -> None:
    N, names = null_space_basis(design)
    X = M @ N
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d.max() * max(X.shape) * np.finfo(float).eps * 10
    rank = int(np.sum(d > tol))
    if rank < X.shape[1]:
        raise RankDeficiencyError([names[j] for j in sorted(piv[rank:])])


@dataclass
class REMLEvaluation:
    score: float
    gradient: np.ndarray | None
    beta: np.ndarray
    sigma2: float
    Ainv: np.ndarray | None
    G: np.ndarray
    rss: float
    penalty: float
    logdet_sigma: float


def _chol_logdet_inv(P: np.ndarray):
    cP = linalg.cho_factor(0.5 * (P + P.T), lower=True)
    return 2.0 * float(np.sum(np.log(np.diag(cP[0])))), linalg.cho_solve(cP, np.eye(P.shape[0]))


def _stable_penalty(lam: np.ndarray, Ss: list, cache: dict):
    """``(logdet, Binv, Q, split)`` of ``P = sum lam_j S_j`` (positive definite overall).

    Rotates to ``Q = [R N]`` with ``R`` the range and ``N`` the null space of
    the dominant ``lam_j S_j``; the logdet is that of ``P_NN`` plus that of
    the Schur complement, and the inverse is kept in the rotated basis.
    ``split`` is ``(j, rank)`` for the dominant penalty, or None.
    """
    q = Ss[0].shape[0]
    if len(Ss) == 1:
        ld, inv = _chol_logdet_inv(lam[0] * Ss[0])
        return ld, inv, np.eye(q), None
    norms = np.array([np.linalg.norm(S, 1) for S in Ss])
    j = int(np.argmax(lam * norms))
    split = cache.get(j)
    if split is None:
        vals, vecs = linalg.eigh(Ss[j])
        keep = vals > vals.max() * 1e-9
        split = (vecs[:, keep], vecs[:, ~keep], {})
        cache[j] = split
    R, N, sub = split
    if N.shape[1] == 0:
        P = sum(l * S for l, S in zip(lam, Ss))
        ld, inv = _chol_logdet_inv(P)
        return ld, inv, np.eye(q), None
    rest = [i for i in range(len(Ss)) if i != j]
    ld_n, Bn, Qn, _ = _stable_penalty(lam[rest], [N.T @ Ss[i] @ N for i in rest], sub)
    inv_nn = Qn @ Bn @ Qn.T
    P_rr = sum(l * (R.T @ S @ R) for l, S in zip(lam, Ss))
    P_rn = sum(lam[i] * (R.T @ Ss[i] @ N) for i in rest)
    K = P_rn @ inv_nn
    ld_s, inv_s = _chol_logdet_inv(P_rr - K @ P_rn.T)
    r = R.shape[1]
    B = np.empty((q, q))
    B[:r, :r] = inv_s
    B[:r, r:] = -inv_s @ K
    B[r:, :r] = B[:r, r:].T
    B[r:, r:] = inv_nn + K.T @ inv_s @ K
    return ld_n + ld_s, B, np.hstack([R, N]), (j, r)


class WorkingModel:
    """Penalized weighted least squares problem at a fixed linearization.

    ``w`` are the diagonal precision weights (prior weights times working
    weights); with ``structure`` given, the errors are additionally ARMA(1,1)
    correlated within plots.
    """

    def __init__(self, M, z, w, design: ModelDesign, structure: PlotStructure | None = None):
        self.M = np.asarray(M, dtype=float)
        self.z = np.asarray(z, dtype=float)
        self.sqrt_w = np.sqrt(np.asarray(w, dtype=float))
        self.design = design
        self.structure = structure
        self.blocks = design.penalty_blocks()
        self.spaces = _term_spaces(design)
        self.n, self.p = self.M.shape
        self.n_null = 1 + sum(N.shape[1] for *_, N in self.spaces)
        self._cache: dict = {}
        self._weighted = np.column_stack([self.M, self.z]) * self.sqrt_w[:, None]
        self._stacked = None
        self._range_cache: dict = {}
        self._split_cache: dict = {}
        self._rotated_cache: dict = {}

    @property
    def n_lambda(self) -> int:
        return len(self.blocks)

    def whitened(self, phi: float, theta: float):
        """``(G, g, zz, log|Sigma|, Mt, zt)`` for the whitened problem.

        ``Mt``/``zt`` rows follow the plot-pattern order, not the data order.
        """
        key = (float(phi), float(theta))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        logdet = -2.0 * float(np.sum(np.log(self.sqrt_w)))
        if self.structure is None or (phi == 0.0 and theta == 0.0):
            R = self._weighted
        else:
            check_arma(phi, theta)
            if self._stacked is None:
                self._stacked = self.structure.stack(self._weighted)
            R, ld = self.structure.whiten_stacked(phi, theta, self._stacked)
            logdet += ld
        C = R.T @ R
        p = self.p
        out = (C[:p, :p], C[:p, p].copy(), float(C[p, p]), logdet, R[:, :p], R[:, p])
        if len(self._cache) > 16:
            self._cache.clear()
        self._cache[key] = out
        return out

    def _range_penalty(self, ti: int, lam):
        """log-determinant and inverse of a term's penalty on its range space.

        Returns ``(logdet, Binv, Q)`` with ``P^-1 = Q Binv Q'``.  The basis ``Q``
        splits off the null space of the dominant penalty so that widely
        different smoothing parameters do not swamp each other.
        """
        sl, idx, U, _ = self.spaces[ti]
        Ss = self._range_blocks(ti)
        if len(idx) == 1:
            ld, inv = _chol_logdet_inv(lam[0] * Ss[0])
            return ld, inv, np.eye(Ss[0].shape[0]), None
        return _stable_penalty(np.asarray(lam, dtype=float), Ss, self._split_cache.setdefault(ti, {}))

    def _rotated_blocks(self, ti: int, Q: np.ndarray, split):
        """Term penalties in the ``[U Q, N]`` basis, exact zeros where a penalty vanishes."""
        key = (ti, split)
        hit = self._rotated_cache.get(key)
        if hit is None:
            sl, idx, U, N = self.spaces[ti]
            q, nn = U.shape[1], N.shape[1]
            hit = []
            for jj, Sr in enumerate(self._range_blocks(ti)):
                B = np.zeros((q + nn, q + nn))
                B[:q, :q] = Q.T @ Sr @ Q
                if split is not None and split[0] == jj:
                    r = split[1]
                    B[r:, :] = 0.0
                    B[:, r:] = 0.0
                hit.append(0.5 * (B + B.T))
            self._rotated_cache[key] = hit
        return hit

    def _range_blocks(self, ti: int):
        hit = self._range_cache.get(ti)
        if hit is None:
            sl, idx, U, _ = self.spaces[ti]
            hit = [U.T @ self.blocks[j][2] @ U for j in idx]
            self._range_cache[ti] = hit
        return hit

    def penalty_matrix(self, lam) -> np.ndarray:
        S = np.zeros((self.p, self.p))
        for lj, (_, sl, Sj) in zip(lam, self.blocks):
            S[sl, sl] += lj * Sj
        return S

    def evaluate(self, log_lambda, phi: float = 0.0, theta: float = 0.0,
                 gradient: bool = False, covariance: bool = False) -> REMLEvaluation:
        """REML score (negative log restricted likelihood, sigma^2 profiled).

        With ``covariance`` the result carries ``Ainv = (G + S_lambda)^-1``.
        """
        rho = np.asarray(log_lambda, dtype=float)
        lam = np.exp(rho)
        G, g, zz, logdet_sigma, _, _ = self.whitened(phi, theta)
        # Work in a basis where each term is rotated to [U Q, N]: the dominant
        # penalty's range and null space get separate coordinates, so that
        # diagonal scaling removes the spread of the smoothing parameters.
        T = np.eye(self.p)
        Sr = np.zeros((self.p, self.p))
        logdet_S = 0.0
        rot = []
        for ti, (sl, idx, U, N) in enumerate(self.spaces):
            ld, Binv, Q, split = self._range_penalty(ti, lam[idx])
            logdet_S += ld
            T[sl, sl] = np.hstack([U @ Q, N])
            blocks = self._rotated_blocks(ti, Q, split)
            Sr[sl, sl] = sum(lam[j] * B for j, B in zip(idx, blocks))
            rot.append((blocks, Binv))
        Gr = T.T @ G @ T
        Ar = 0.5 * (Gr + Gr.T) + Sr
        gr = T.T @ g
        dg = np.sqrt(np.diag(Ar))
        if np.any(dg <= 0):
            raise GammError("penalized normal equations have a zero diagonal")
        dinv = 1.0 / dg
        As = Ar * dinv[:, None] * dinv[None, :]
        log_scale = 2.0 * float(np.sum(np.log(dg)))
        want_inv = gradient or covariance
        try:
            cf = linalg.cho_factor(As, lower=True)
            br = dinv * linalg.cho_solve(cf, dinv * gr)
            logdet_A = 2.0 * float(np.sum(np.log(np.diag(cf[0])))) + log_scale
            Ainv_r = dinv[:, None] * linalg.cho_solve(cf, np.diag(dinv)) if want_inv else None
        except linalg.LinAlgError:
            vals, vecs = linalg.eigh(As)
            if vals.min() <= vals.max() * 1e-14:
                raise GammError("penalized normal equations are numerically singular or indefinite")
            br = dinv * (vecs @ ((vecs.T @ (dinv * gr)) / vals))
            logdet_A = float(np.sum(np.log(vals))) + log_scale
            Ainv_r = (dinv[:, None] * vecs / vals) @ (vecs.T * dinv[None, :]) if want_inv else None
        beta = T @ br
        pen = float(br @ Sr @ br)
        # second order in the solve error, unlike zz - beta'g
        Dp = zz - 2.0 * float(br @ gr) + float(br @ Ar @ br)
        Dp = max(Dp, 1e-300 * max(zz, 1.0))
        rss = max(Dp - pen, 0.0)
        nr = self.n - self.n_null
        if nr <= 0:
            raise GammError("fewer observations than unpenalized coefficients")
        sigma2 = Dp / nr
        V = nr * (LOG2PI + np.log(sigma2)) + nr + logdet_A - logdet_S + logdet_sigma
        grad = None
        if gradient:
            grad = np.zeros(self.n_lambda)
            for (sl, idx, _, _), (blocks, Binv) in zip(self.spaces, rot):
                Ai = Ainv_r[sl, sl]
                bt = br[sl]
                q = Binv.shape[0]
                for j, B in zip(idx, blocks):
                    d_rss = lam[j] * float(bt @ B @ bt) / sigma2
                    d_A = lam[j] * float(np.sum(Ai * B))
                    d_S = lam[j] * float(np.sum(Binv * B[:q, :q]))
                    grad[j] = 0.5 * (d_rss + d_A - d_S)
        Ainv = T @ Ainv_r @ T.T if covariance else None
        if covariance:
            Ainv = 0.5 * (Ainv + Ainv.T)
        return REMLEvaluation(0.5 * V, grad, beta, sigma2, Ainv, G, rss, pen, logdet_sigma)

    def optimize(self, log_lambda0, phi0: float, theta0: float, *, fit_lambda: bool = True,
                 fit_arma: bool = True, config: OptimizerConfig | None = None):
        """Minimize the REML score; returns (log_lambda, phi, theta, n_evals)."""
        config = config or OptimizerConfig()
        rho0 = np.asarray(log_lambda0, dtype=float)
        m = self.n_lambda
        fit_lambda = fit_lambda and m > 0
        fit_arma = fit_arma and self.structure is not None
        if not (fit_lambda or fit_arma):
            return rho0, phi0, theta0, 0
        lo, hi = config.log_lambda_bounds
        ab = config.atanh_bound
        x0, bounds = [], []
        if fit_lambda:
            x0 += list(np.clip(rho0, lo, hi))
            bounds += [(lo, hi)] * m
        if fit_arma:
            x0 += [float(np.clip(np.arctanh(phi0), -ab, ab)), float(np.clip(np.arctanh(theta0), -ab, ab))]
            bounds += [(-ab, ab)] * 2
        x0 = np.asarray(x0)

        def unpack(x):
            rho = x[:m] if fit_lambda else rho0
            if fit_arma:
                a = x[-2:]
                return rho, float(np.tanh(a[0])), float(np.tanh(a[1]))
            return rho, phi0, theta0

        n_evals = [0]

        def fun(x):
            n_evals[0] += 1
            rho, phi, theta = unpack(x)
            ev = self.evaluate(rho, phi, theta, gradient=fit_lambda)
            grad = []
            if fit_lambda:
                grad += list(ev.gradient)
            if fit_arma:
                h = config.fd_step
                for k in (0, 1):
                    xp, xm = x.copy(), x.copy()
                    xp[m * fit_lambda + k] += h
                    xm[m * fit_lambda + k] -= h
                    fp = self.evaluate(*unpack(xp)).score
                    fm = self.evaluate(*unpack(xm)).score
                    grad.append((fp - fm) / (2.0 * h))
            return ev.score, np.asarray(grad)

        res = optimize.minimize(
            fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": config.max_outer_iter, "ftol": config.reml_tol * 1e-6,
                     "gtol": config.reml_tol, "maxls": 40},
        )
        x = res.x
        lo_b = np.array([b[0] for b in bounds])
        hi_b = np.array([b[1] for b in bounds])
        # projected gradient: components pushing against an active bound do not count
        pg = np.where(((x <= lo_b) & (res.jac > 0)) | ((x >= hi_b) & (res.jac < 0)), 0.0, res.jac)
        abnormal = not res.success and "ABNORMAL" in str(res.message).upper()
        if abnormal and np.max(np.abs(pg)) > config.accept_grad:
            logger.info("L-BFGS-B line search failed (%s); switching to Nelder-Mead", res.message)
            nm = optimize.minimize(
                lambda x: fun(np.clip(x, lo_b, hi_b))[0], x, method="Nelder-Mead",
                options={"xatol": 1e-6, "fatol": config.reml_tol, "maxiter": 100 * len(x)},
            )
            xn = np.clip(nm.x, lo_b, hi_b)
            if fun(xn)[0] < res.fun:
                x = xn
        elif not res.success and not abnormal and res.nit >= config.max_outer_iter:
            raise ConvergenceError(f"REML optimization did not converge: {res.message}",
                                   last=dict(zip(("log_lambda", "phi", "theta"), unpack(x))))
        rho, phi, theta = unpack(x)
        return np.asarray(rho, dtype=float), phi, theta, n_evals[0]


def reml_score(model: WorkingModel, log_lambda, phi: float = 0.0, theta: float = 0.0,
               gradient: bool = False):
    """REML score of a working model, optionally with its log-lambda gradient."""
    ev = model.evaluate(log_lambda, phi, theta, gradient=gradient)
    return (ev.score, ev.gradient) if gradient else ev.score


def posterior_covariance(G: np.ndarray, S_lambda: np.ndarray, sigma2: float) -> np.ndarray:
    """Bayesian covariance ``sigma^2 (G + S_lambda)^-1`` of all coefficients."""
    A = 0.5 * (G + G.T) + 0.5 * (S_lambda + S_lambda.T)
    try:
        cf = linalg.cho_factor(A, lower=True)
        Ainv = linalg.cho_solve(cf, np.eye(A.shape[0]))
    except linalg.LinAlgError:
        vals, vecs = linalg.eigh(A)
        if vals.min() <= vals.max() * 1e-14:
            raise GammError("posterior precision matrix is numerically singular")
        Ainv = (vecs / vals) @ vecs.T
    V = sigma2 * Ainv
    return 0.5 * (V + V.T)


# --------------------------------------------------------------------------
# fitted model


@dataclass
class FittedModel:
    design: ModelDesign
    coefficients: np.ndarray
    Vp: np.ndarray
    lambdas: np.ndarray
    sigma2: float
    phi: float
    theta: float
    correlation: str
    link: str
    edf: np.ndarray
    stats: dict
    fingerprint: str = ""
    trace: list = field(default_factory=list)

    @property
    def linkobj(self) -> Link:
        return LINKS[self.link]

    @property
    def term_edf(self) -> dict[str, float]:
        out = {"(Intercept)": float(self.edf[0])}
        for t in self.design.terms:
            out[t.name] = float(np.sum(self.edf[t.cols]))
        return out

    def predict_matrix(self, newdata, return_flags: bool = False):
        M = self.design.model_matrix(newdata)
        if return_flags:
            return M, self.design.extrapolation_flags(newdata)
        return M

    def linear_predictor(self, newdata, coefficients=None) -> np.ndarray:
        beta = self.coefficients if coefficients is None else coefficients
        return self.predict_matrix(newdata) @ beta

    def predict(self, newdata, type: str = "response") -> np.ndarray:
        eta = self.linear_predictor(newdata)
        if type == "link":
            return eta
        if type != "response":
            raise ValueError("type must be 'response' or 'link'")
        return self.linkobj.linkinv(eta)

    def to_dict(self) -> dict:
        il = np.tril_indices(self.Vp.shape[0])
        return {
            "design": self.design.to_dict(),
            "coefficients": self.coefficients.tolist(),
            "Vp_lower": self.Vp[il].tolist(),
            "lambdas": np.asarray(self.lambdas, dtype=float).tolist(),
            "sigma2": float(self.sigma2),
            "phi": float(self.phi),
            "theta": float(self.theta),
            "correlation": self.correlation,
            "link": self.link,
            "edf": self.edf.tolist(),
            "stats": self.stats,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        coef = np.asarray(d["coefficients"], dtype=float)
        p = coef.size
        Vp = np.zeros((p, p))
        il = np.tril_indices(p)
        Vp[il] = d["Vp_lower"]
        Vp = Vp + np.tril(Vp, -1).T
        return cls(
            design=ModelDesign.from_dict(d["design"]),
            coefficients=coef,
            Vp=Vp,
            lambdas=np.asarray(d["lambdas"], dtype=float),
            sigma2=float(d["sigma2"]),
            phi=float(d["phi"]),
            theta=float(d["theta"]),
            correlation=d["correlation"],
            link=d["link"],
            edf=np.asarray(d["edf"], dtype=float),
            stats=dict(d["stats"]),
            fingerprint=d.get("fingerprint", ""),
        )


def _canonical(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def save_model(model: FittedModel, path: str | Path) -> None:
    payload = model.to_dict()
    doc = {"schema": SCHEMA, "checksum": hashlib.sha256(_canonical(payload)).hexdigest(), "payload": payload}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> FittedModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: not a valid model file ({exc})")
    if not isinstance(doc, dict) or "schema" not in doc:
        raise ModelFileError(f"{path}: missing schema tag")
    if doc["schema"] != SCHEMA:
        raise ModelFileError(f"{path}: unsupported model schema {doc['schema']!r} (this reader handles {SCHEMA!r})")
    payload = doc.get("payload")
    if payload is None or hashlib.sha256(_canonical(payload)).hexdigest() != doc.get("checksum"):
        raise ModelFileError(f"{path}: checksum mismatch, file is corrupted")
    return FittedModel.from_dict(payload)


# --------------------------------------------------------------------------
# fitting


def _get(data, key):
    return np.asarray(data[key] if isinstance(data, dict) else getattr(data, key))


def _fit_statistics(y, mu, prior_w, edf_total, n_err, sigma2, rss_w, logdet_sigma, n):
    wm = np.sum(prior_w * y) / np.sum(prior_w)
    tss = float(np.sum(prior_w * (y - wm) ** 2))
    rss = float(np.sum(prior_w * (y - mu) ** 2))
    r2 = 1.0 - (n - 1) / (n - edf_total) * rss / tss if tss > 0 and n > edf_total else float("nan")
    loglik = -0.5 * (n * (LOG2PI + np.log(sigma2)) + rss_w / sigma2 + logdet_sigma) if sigma2 > 0 else float("inf")
    bic = -2.0 * loglik + np.log(n) * (edf_total + n_err)
    return {"r2_adj": float(r2), "bic": float(bic), "loglik": float(loglik), "n": int(n),
            "edf_total": float(edf_total)}


def fit_gamm(
    data,
    smooth: SmoothConfig | None = None,
    correlation: str = "arma11",
    link: str = "logit",
    *,
    lambdas=None,
    arma: tuple[float, float] | None = None,
    optimizer: OptimizerConfig | None = None,
    start: dict | None = None,
    design: ModelDesign | None = None,
) -> FittedModel:
    """Fit the additive model with weights and optional ARMA(1,1) errors.

    ``lambdas`` and ``arma`` fix the smoothing or correlation parameters
    instead of estimating them.  ``start`` may carry ``lambdas``, ``phi`` and
    ``theta`` as optimizer starting values.
    """
    if correlation not in ("arma11", "none"):
        raise ValueError("correlation must be 'arma11' or 'none'")
    if link not in LINKS:
        raise ValueError(f"link must be one of {sorted(LINKS)}")
    config = optimizer or OptimizerConfig()
    lk = LINKS[link]
    y = _get(data, "y").astype(float)
    alpha = _get(data, "n_trees").astype(float)
    if not np.all(np.isfinite(y)):
        raise GammError("response has missing values")
    if np.any(alpha < 1):
        raise GammError("tree counts must be at least 1")
    design = design or build_design(data, smooth)
    M = design.model_matrix(data)
    check_unpenalized_rank(design, M)
    structure = PlotStructure(_get(data, "plot_id"), _get(data, "year")) if correlation == "arma11" else None
    m = design.n_penalties
    start = start or {}

    if lambdas is not None:
        rho = np.log(np.asarray(lambdas, dtype=float).reshape(m))
    elif "lambdas" in start:
        rho = np.log(np.asarray(start["lambdas"], dtype=float))
    else:
        rho = np.zeros(m)
    if correlation == "none":
        phi = theta = 0.0
    elif arma is not None:
        phi, theta = map(float, arma)
        check_arma(phi, theta)
    else:
        phi = float(start.get("phi", config.init_phi))
        theta = float(start.get("theta", config.init_theta))

    if link == "identity":
        eta = y.copy()
    else:
        eta = lk.linkfun(np.clip(y, 0.01, 0.99))
    trace = []
    beta_old = None
    converged = False
    fit_arma = arma is None and correlation == "arma11"
    fit_lambda = lambdas is None
    # Stages: "warmup" estimates lambda only, since early working responses are
    # too rough to identify the ARMA parameters; "alternate" re-estimates all
    # parameters at every linearization; "inner" holds them fixed and iterates
    # to a converged linearization, after which one more REML optimization
    # checks that the parameters no longer improve.
    stage = "warmup" if fit_arma and link != "identity" else "alternate"
    for it in range(config.max_pql_iter):
        d = lk.mu_eta(eta)
        mu = lk.linkinv(eta)
        z = eta + (y - mu) / d
        w = alpha * d * d
        wm = WorkingModel(M, z, w, design, structure)
        nev = 0
        if stage != "inner":
            rho, phi, theta, nev = wm.optimize(rho, phi, theta, fit_lambda=fit_lambda,
                                              fit_arma=fit_arma and stage != "warmup", config=config)
        ev = wm.evaluate(rho, phi, theta)
        beta = ev.beta
        change = float("inf") if beta_old is None else float(
            np.max(np.abs(beta - beta_old)) / max(np.max(np.abs(beta)), 1e-300))
        record = {"iter": it, "stage": stage, "reml": float(ev.score), "change": change,
                  "log_lambda": [float(r) for r in rho], "phi": float(phi), "theta": float(theta),
                  "sigma2": float(ev.sigma2), "n_evals": nev}
        trace.append(record)
        logger.debug("PQL iter %d (%s): reml=%.8g change=%.3g phi=%.4f theta=%.4f",
                     it, stage, ev.score, change, phi, theta)
        eta = M @ beta
        beta_old = beta
        if link == "identity":
            converged = True
            break
        if stage == "warmup":
            if change <= config.warmup_tol or it + 1 >= config.max_warmup_iter:
                stage = "alternate"
        elif stage == "alternate":
            if change < config.alternate_tol:
                stage = "inner"
        elif change < config.pql_tol:
            if not (fit_lambda or fit_arma):
                converged = True
                break
            rho_n, phi_n, theta_n, nev = wm.optimize(rho, phi, theta, fit_lambda=fit_lambda,
                                                     fit_arma=fit_arma, config=config)
            gain = ev.score - wm.evaluate(rho_n, phi_n, theta_n).score
            record["reml_gain"] = float(gain)
            record["n_evals"] = nev
            if gain <= config.reml_tol * max(1.0, abs(ev.score)):
                converged = True
                break
            rho, phi, theta = rho_n, phi_n, theta_n
    if not converged:
        raise ConvergenceError(
            f"PQL iteration did not converge in {config.max_pql_iter} iterations",
            last={"coefficients": beta_old, "log_lambda": rho, "phi": phi, "theta": theta},
            trace=trace,
        )

    lam = np.exp(rho)
    ev = wm.evaluate(rho, phi, theta, covariance=True)
    Vp = ev.sigma2 * ev.Ainv
    edf = np.einsum("ij,ji->i", ev.Ainv, ev.G)
    mu = lk.linkinv(M @ beta)
    _, _, _, _, Mt, zt = wm.whitened(phi, theta)
    rss_w = float(np.sum((zt - Mt @ beta) ** 2))
    n_err = 1 + (2 if correlation == "arma11" else 0)
    stats = _fit_statistics(y, mu, alpha, float(edf.sum()), n_err, ev.sigma2, rss_w, ev.logdet_sigma, y.size)
    stats["reml"] = float(ev.score)
    stats["pql_iterations"] = len(trace)
    fingerprint = data.fingerprint() if hasattr(data, "fingerprint") else ""
    return FittedModel(
        design=design, coefficients=beta, Vp=Vp, lambdas=lam, sigma2=float(ev.sigma2),
        phi=float(phi), theta=float(theta), correlation=correlation, link=link, edf=edf,
        stats=stats, fingerprint=fingerprint, trace=trace,
    )


def working_model_at(model: FittedModel, data) -> WorkingModel:
    """Working model linearized at a fitted model's coefficients."""
    lk = model.linkobj
    M = model.design.model_matrix(data)
    eta = M @ model.coefficients
    d = lk.mu_eta(eta)
    z = eta + (_get(data, "y") - lk.linkinv(eta)) / d
    w = _get(data, "n_trees").astype(float) * d * d
    structure = PlotStructure(_get(data, "plot_id"), _get(data, "year")) if model.correlation == "arma11" else None
    return WorkingModel(M, z, w, model.design, structure)


def fit_statistics(model: FittedModel) -> dict:
    """BIC, adjusted R^2, effective degrees of freedom per term and n."""
    out = {k: model.stats[k] for k in ("bic", "r2_adj", "n", "edf_total")}
    out["edf"] = model.term_edf
    return out
