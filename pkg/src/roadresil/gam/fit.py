"""Penalised IRLS fitting of generalised additive models.

The linear predictor is

    intercept + linear terms + sum of centred smooths + tensor interaction

with one quadratic penalty per smooth (two for the tensor term). For fixed
smoothing parameters the coefficients come from penalised IRLS with step
halving; smoothing parameters are chosen by minimising GCV over a fixed grid
by coordinate search. For the negative binomial family the dispersion
``theta`` alternates with the fit through a Pearson moment equation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from scipy import stats as sps
from scipy.linalg import lapack

from roadresil.core import CATEGORY_LEVELS, REFERENCE_LEVELS
from roadresil.gam.basis import CubicRegressionSpline, TensorInteraction
from roadresil.gam.families import THETA_MAX, THETA_MIN, GaussianIdentity, NegBinLog, make_family, nb_theta_moment
from roadresil.stats import Standardizer

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(-4, 8, 25))
MAX_THETA_ITER = 50
THETA_TOL = 1e-6


class DegenerateModelError(ValueError):
    """The penalised normal equations are rank deficient."""

    def __init__(self, terms: Sequence[str], message: str):
        super().__init__(message)
        self.terms = tuple(terms)


# --- model specification ---------------------------------------------------


@dataclass(frozen=True)
class LinearTerm:
    variable: str
    encoding: str = "numeric"  # "numeric" (2-SD standardised) or "categorical"
    reference: Optional[str] = None

    def __post_init__(self):
        if self.encoding not in ("numeric", "categorical"):
            raise ValueError(f"unknown encoding {self.encoding!r}")


@dataclass(frozen=True)
class SmoothTerm:
    variable: str
    k: int = 10
    order: int = 2

    def __post_init__(self):
        if self.k < 3:
            raise ValueError("basis dimension must be >= 3")
        if self.order != 2:
            raise ValueError("only second-derivative penalties are supported")

    @property
    def label(self) -> str:
        return f"s({self.variable})"


@dataclass(frozen=True)
class TensorTerm:
    variables: tuple[str, str] = ("lat", "lon")
    k: tuple[int, int] = (5, 5)

    def __post_init__(self):
        if min(self.k) < 3:
            raise ValueError("marginal basis dimensions must be >= 3")

    @property
    def label(self) -> str:
        return f"ti({self.variables[0]},{self.variables[1]})"


@dataclass(frozen=True)
class GamSpec:
    response: str
    family: str = "GaussianIdentity"
    linear_terms: tuple[LinearTerm, ...] = ()
    smooth_terms: tuple[SmoothTerm, ...] = ()
    tensor_term: Optional[TensorTerm] = None
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    theta: Optional[float] = None  # fixed NB dispersion; estimated when None
    fixed_lambda: Optional[tuple[float, ...]] = None  # skip GCV and use these
    max_iter: int = 200
    tol: float = 1e-8

    def __post_init__(self):
        make_family(self.family)
        if not self.lambda_grid or any(not l > 0 for l in self.lambda_grid):
            raise ValueError("lambda_grid must hold positive values")
        object.__setattr__(self, "linear_terms", tuple(self.linear_terms))
        object.__setattr__(self, "smooth_terms", tuple(self.smooth_terms))
        object.__setattr__(self, "lambda_grid", tuple(float(l) for l in self.lambda_grid))

    @property
    def n_penalties(self) -> int:
        return len(self.smooth_terms) + (2 if self.tensor_term else 0)


# --- linear algebra --------------------------------------------------------


class _PivotedCholesky:
    """Symmetric pivoted Cholesky of a positive semi-definite matrix, after
    diagonal equilibration. Rank deficiency is reported, never papered over."""

    def __init__(self, A: np.ndarray):
        d = np.sqrt(np.abs(np.diag(A)))
        d[d == 0] = 1.0
        self.d = d
        As = A / d[:, None] / d[None, :]
        U, piv, rank, info = lapack.dpstrf(As, lower=0)
        if info < 0:
            raise ValueError(f"dpstrf failed with info={info}")
        self.p = A.shape[0]
        self.rank = int(rank)
        self.piv = piv[: self.p] - 1
        self.U = np.triu(U)

    def solve(self, b: np.ndarray) -> np.ndarray:
        bs = (b / self.d if b.ndim == 1 else b / self.d[:, None])[self.piv]
        y = linalg.solve_triangular(self.U, bs, trans="T", lower=False, check_finite=False)
        x = linalg.solve_triangular(self.U, y, lower=False, check_finite=False)
        out = np.empty_like(x)
        out[self.piv] = x
        return out / self.d if b.ndim == 1 else out / self.d[:, None]

    def inverse(self) -> np.ndarray:
        Ui = linalg.solve_triangular(self.U, np.eye(self.p), lower=False, check_finite=False)
        inv_p = Ui @ Ui.T
        inv = np.empty_like(inv_p)
        inv[np.ix_(self.piv, self.piv)] = inv_p
        return inv / self.d[:, None] / self.d[None, :]


# --- design ----------------------------------------------------------------


@dataclass
class _Block:
    label: str
    kind: str  # "parametric" or "smooth"
    cols: slice


class Design:
    """Model matrix construction, reusable for prediction on new data."""

    def __init__(self, spec: GamSpec, data: pd.DataFrame):
        self.spec = spec
        self.standardizers: dict[str, Standardizer] = {}
        self.levels: dict[str, tuple[str, list[str]]] = {}
        self.smooths: dict[str, CubicRegressionSpline] = {}
        self.tensor: Optional[TensorInteraction] = None
        self.coef_names: list[str] = ["(Intercept)"]
        self.blocks: list[_Block] = [_Block("(Intercept)", "parametric", slice(0, 1))]
        self.penalties: list[tuple[str, slice, np.ndarray]] = []

        for lt in spec.linear_terms:
            x = data[lt.variable]
            start = len(self.coef_names)
            if lt.encoding == "numeric":
                x = np.asarray(x, dtype=float)
                sd = float(np.std(x, ddof=1))
                if not sd > 0:
                    raise DegenerateModelError([lt.variable], f"linear term {lt.variable} is constant")
                self.standardizers[lt.variable] = Standardizer(float(np.mean(x)), sd)
                self.coef_names.append(lt.variable)
                self.blocks.append(_Block(lt.variable, "parametric", slice(start, start + 1)))
            else:
                vals = _as_levels(x)
                known = CATEGORY_LEVELS.get(lt.variable)
                present = set(vals)
                levels = [l for l in known if l in present] if known else sorted(present)
                ref = lt.reference or REFERENCE_LEVELS.get(lt.variable) or levels[0]
                if ref not in present:
                    raise DegenerateModelError([lt.variable], f"reference level {ref!r} of {lt.variable} absent from data")
                others = [l for l in levels if l != ref]
                self.levels[lt.variable] = (ref, others)
                for l in others:
                    self.coef_names.append(f"{lt.variable}[{l}]")
                self.blocks.append(_Block(lt.variable, "parametric", slice(start, start + len(others))))

        for st in spec.smooth_terms:
            sp = CubicRegressionSpline(np.asarray(data[st.variable], dtype=float), st.k)
            self.smooths[st.variable] = sp
            start = len(self.coef_names)
            self.coef_names += [f"{st.label}.{i + 1}" for i in range(sp.dim)]
            cols = slice(start, start + sp.dim)
            self.blocks.append(_Block(st.label, "smooth", cols))
            self.penalties.append((st.label, cols, sp.S))

        if spec.tensor_term is not None:
            tt = spec.tensor_term
            v1, v2 = tt.variables
            self.tensor = TensorInteraction(
                np.asarray(data[v1], dtype=float), np.asarray(data[v2], dtype=float), tt.k[0], tt.k[1]
            )
            start = len(self.coef_names)
            self.coef_names += [f"{tt.label}.{i + 1}" for i in range(self.tensor.dim)]
            cols = slice(start, start + self.tensor.dim)
            self.blocks.append(_Block(tt.label, "smooth", cols))
            self.penalties.append((f"{tt.label}[{v1}]", cols, self.tensor.S[0]))
            self.penalties.append((f"{tt.label}[{v2}]", cols, self.tensor.S[1]))

    @property
    def n_coef(self) -> int:
        return len(self.coef_names)

    def matrix(self, data: pd.DataFrame) -> np.ndarray:
        n = len(data)
        cols = [np.ones((n, 1))]
        for lt in self.spec.linear_terms:
            if lt.encoding == "numeric":
                cols.append(self.standardizers[lt.variable].transform(np.asarray(data[lt.variable], dtype=float))[:, None])
            else:
                ref, others = self.levels[lt.variable]
                vals = np.asarray(_as_levels(data[lt.variable]))
                cols.append(np.column_stack([(vals == l).astype(float) for l in others]) if others else np.empty((n, 0)))
        for st in self.spec.smooth_terms:
            cols.append(self.smooths[st.variable].basis(np.asarray(data[st.variable], dtype=float)))
        if self.tensor is not None:
            v1, v2 = self.spec.tensor_term.variables
            cols.append(self.tensor.basis(np.asarray(data[v1], dtype=float), np.asarray(data[v2], dtype=float)))
        return np.hstack(cols)

    def penalty(self, lambdas: Sequence[float]) -> np.ndarray:
        S = np.zeros((self.n_coef, self.n_coef))
        for lam, (_, cols, Sj) in zip(lambdas, self.penalties):
            S[cols, cols] += lam * Sj
        return S

    def term_of_column(self, j: int) -> str:
        for b in self.blocks:
            if b.cols.start <= j < b.cols.stop:
                return b.label
        raise IndexError(j)


def _as_levels(x) -> list[str]:
    out = []
    for v in x:
        if isinstance(v, (bool, np.bool_)):
            out.append("True" if v else "False")
        elif hasattr(v, "value"):
            out.append(str(v.value))
        else:
            out.append(str(v))
    return out


# --- penalised IRLS --------------------------------------------------------


@dataclass
class _State:
    beta: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    w: np.ndarray
    chol: _PivotedCholesky
    XtWX: np.ndarray
    deviance: float
    pen: float
    edf_coef: np.ndarray
    gcv: float
    iterations: int
    converged: bool
    pdev_trace: list

    @property
    def edf_total(self) -> float:
        return float(self.edf_coef.sum())


class _Fitter:
    def __init__(self, X, y, design: Design, max_iter: int, tol: float):
        self.X = X
        self.y = y
        self.design = design
        self.max_iter = max_iter
        self.tol = tol
        self.n = y.size
        self._XtX = X.T @ X
        self._Xty = X.T @ y

    def _factor(self, A):
        chol = _PivotedCholesky(A)
        if chol.rank < A.shape[0]:
            bad = sorted({self.design.term_of_column(int(j)) for j in chol.piv[chol.rank :]})
            raise DegenerateModelError(bad, f"model matrix is rank deficient ({chol.rank} < {A.shape[0]}); check terms {bad}")
        return chol

    def _finish(self, beta, mu, eta, w, XtWX, S, chol, dev, iterations, converged, trace):
        Ainv = chol.inverse()
        edf_coef = np.sum(Ainv * XtWX, axis=1)
        tau = float(edf_coef.sum())
        denom = (self.n - tau) ** 2
        gcv = self.n * dev / denom if denom > 0 else math.inf
        return _State(beta, mu, eta, w, chol, XtWX, dev, float(beta @ S @ beta), edf_coef, gcv, iterations, converged, trace)

    def gaussian(self, S) -> _State:
        XtWX = self._XtX
        chol = self._factor(XtWX + S)
        beta = chol.solve(self._Xty)
        mu = self.X @ beta
        r = self.y - mu
        dev = float(r @ r)
        pdev = dev + float(beta @ S @ beta)
        return self._finish(beta, mu, mu, np.ones(self.n), XtWX, S, chol, dev, 1, True, [pdev])

    def pirls(self, fam, S, beta0: Optional[np.ndarray] = None) -> _State:
        X, y = self.X, self.y
        if beta0 is None:
            mu = fam.init_mu(y)
            eta = fam.link(mu)
            beta_old = None
            pdev_old = math.inf
        else:
            beta_old = beta0
            eta = X @ beta0
            mu = fam.inverse(eta)
            pdev_old = fam.deviance(y, mu) + float(beta0 @ S @ beta0)
        trace = []
        converged = False
        it = 0
        for it in range(1, self.max_iter + 1):
            g = fam.dmu_deta(eta)
            w = g * g / fam.variance(mu)
            if not np.all(np.isfinite(w)) or not np.any(w > 0):
                raise DegenerateModelError(["(weights)"], "IRLS weights degenerate")
            z = eta + (y - mu) / g
            XtW = X.T * w
            chol = self._factor(XtW @ X + S)
            beta = chol.solve(XtW @ z)
            eta_n = X @ beta
            mu_n = fam.inverse(eta_n)
            pdev = fam.deviance(y, mu_n) + float(beta @ S @ beta)
            halvings = 0
            while beta_old is not None and not pdev <= pdev_old and halvings < 40:
                beta = 0.5 * (beta + beta_old)
                eta_n = X @ beta
                mu_n = fam.inverse(eta_n)
                pdev = fam.deviance(y, mu_n) + float(beta @ S @ beta)
                halvings += 1
            if beta_old is not None and not pdev <= pdev_old:
                # no descent direction left: stay put
                beta, pdev = beta_old, pdev_old
                eta_n = X @ beta
                mu_n = fam.inverse(eta_n)
            trace.append(pdev)
            change = abs(pdev_old - pdev)
            beta_old, eta, mu = beta, eta_n, mu_n
            if change < self.tol * (abs(pdev) + 0.1):
                converged = True
                pdev_old = pdev
                break
            pdev_old = pdev
        g = fam.dmu_deta(eta)
        w = g * g / fam.variance(mu)
        XtWX = (X.T * w) @ X
        chol = self._factor(XtWX + S)
        return self._finish(beta_old, mu, eta, w, XtWX, S, chol, fam.deviance(y, mu), it, converged, trace)


def _coordinate_gcv(evaluate, m: int, grid: Sequence[float], start: Optional[tuple[int, ...]] = None):
    """Coordinate search over grid indices; returns (index tuple, cache)."""
    cache: dict[tuple[int, ...], _State] = {}

    def score(ix):
        if ix not in cache:
            cache[ix] = evaluate(tuple(grid[i] for i in ix))
        return cache[ix].gcv

    cur = tuple(start) if start is not None else tuple([len(grid) // 2] * m)
    best = score(cur)
    for _ in range(25):
        changed = False
        for j in range(m):
            cands = [cur[:j] + (g,) + cur[j + 1 :] for g in range(len(grid))]
            scores = [score(c) for c in cands]
            g = int(np.argmin(scores))
            if scores[g] < best:
                cur, best, changed = cands[g], scores[g], True
        if not changed:
            break
    return cur, cache


# --- fit result ------------------------------------------------------------


@dataclass
class GamFit:
    spec: GamSpec
    design: Design
    coef_names: list[str]
    coefficients: np.ndarray
    vcov: np.ndarray
    lambdas: dict[str, float]
    theta: Optional[float]
    edf: dict[str, float]
    edf_coef: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    deviance: float
    null_deviance: float
    deviance_explained: float
    r2_adjusted: float
    aic: float
    scale: float
    n: int
    converged: bool
    iterations: int
    pdev_trace: list
    gcv_score: float
    gcv_trace: dict = field(default_factory=dict)
    theta_trace: list = field(default_factory=list)
    X: Optional[np.ndarray] = None

    @property
    def edf_total(self) -> float:
        return float(self.edf_coef.sum())

    @property
    def residual_df(self) -> float:
        return self.n - self.edf_total

    def _quantile(self) -> float:
        if self.spec.family == "GaussianIdentity":
            return float(sps.t.ppf(0.975, self.residual_df))
        return float(sps.norm.ppf(0.975))

    def conf_int(self) -> np.ndarray:
        se = np.sqrt(np.diag(self.vcov))
        q = self._quantile()
        return np.column_stack([self.coefficients - q * se, self.coefficients + q * se])

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.coef_names.index(name)])

    def predict(self, data, type: str = "response") -> np.ndarray:
        X = self.design.matrix(pd.DataFrame(data))
        eta = X @ self.coefficients
        if type == "link":
            return eta
        return make_family(self.spec.family, self.theta or 1.0).inverse(eta)

    def term_block(self, label: str) -> slice:
        for b in self.design.blocks:
            if b.label == label:
                return b.cols
        raise KeyError(label)

    def partial_effect(self, label: str, data) -> tuple[np.ndarray, np.ndarray]:
        """Contribution of one smooth term on the link scale, with its SE."""
        data = pd.DataFrame(data)
        d = self.design
        if d.tensor is not None and label == self.spec.tensor_term.label:
            v1, v2 = self.spec.tensor_term.variables
            B = d.tensor.basis(np.asarray(data[v1], dtype=float), np.asarray(data[v2], dtype=float))
        else:
            var = label[2:-1]
            B = d.smooths[var].basis(np.asarray(data[var], dtype=float))
        cols = self.term_block(label)
        fit = B @ self.coefficients[cols]
        V = self.vcov[cols, cols]
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", B, V, B), 0.0))
        return fit, se

    def smooth_test(self, label: str) -> tuple[float, float, float]:
        """Approximate Wald test of a smooth term: (statistic, ref df, p)."""
        cols = self.term_block(label)
        b = self.coefficients[cols]
        V = self.vcov[cols, cols]
        r = max(1, int(round(self.edf[label])))
        vals, vecs = np.linalg.eigh(V)
        order = np.argsort(vals)[::-1][:r]
        vals, vecs = vals[order], vecs[:, order]
        keep = vals > vals[0] * 1e-12 if vals.size else vals
        proj = vecs[:, keep].T @ b
        stat = float(np.sum(proj**2 / vals[keep]))
        r = int(keep.sum())
        if self.spec.family == "GaussianIdentity":
            p = float(sps.f.sf(stat / r, r, self.residual_df))
        else:
            p = float(sps.chi2.sf(stat, r))
        return stat, float(r), p


# --- entry point -----------------------------------------------------------


def fit_gam(spec: GamSpec, data) -> GamFit:
    """Fit ``spec`` to ``data`` (a DataFrame or mapping of columns)."""
    df = pd.DataFrame(data)
    used = [spec.response] + [t.variable for t in spec.linear_terms] + [t.variable for t in spec.smooth_terms]
    if spec.tensor_term:
        used += list(spec.tensor_term.variables)
    missing = [c for c in used if c not in df.columns]
    if missing:
        raise KeyError(f"columns missing from data: {missing}")
    sub = df[list(dict.fromkeys(used))]
    if sub.isna().any().any():
        bad = [c for c in sub.columns if sub[c].isna().any()]
        raise ValueError(f"missing values in {bad}; drop incomplete rows first")

    y = np.asarray(df[spec.response], dtype=float)
    design = Design(spec, df)
    X = design.matrix(df)
    m = len(design.penalties)
    fitter = _Fitter(X, y, design, spec.max_iter, spec.tol)
    gaussian = spec.family in ("GaussianIdentity", "Gaussian")
    if not gaussian and np.any((y < 0) | (y != np.round(y))):
        raise ValueError("negative binomial response must hold non-negative integers")

    grid = spec.lambda_grid
    theta_trace: list = []
    last_beta = [None]

    def run(fam, lams):
        S = design.penalty(lams)
        if gaussian:
            return fitter.gaussian(S)
        st = fitter.pirls(fam, S, last_beta[0])
        last_beta[0] = st.beta
        return st

    def select(fam, start=None):
        if spec.fixed_lambda is not None:
            if len(spec.fixed_lambda) != m:
                raise ValueError(f"fixed_lambda needs {m} values")
            return tuple(spec.fixed_lambda), run(fam, tuple(spec.fixed_lambda)), None, {}
        if m == 0:
            return (), run(fam, ()), None, {}
        ix, cache = _coordinate_gcv(lambda l: run(fam, l), m, grid, start)
        return tuple(grid[i] for i in ix), cache[ix], ix, {tuple(grid[i] for i in k): v.gcv for k, v in cache.items()}

    theta = None
    theta_converged = True
    if gaussian:
        fam = GaussianIdentity()
        lams, state, _, gcv_trace = select(fam)
    elif spec.theta is not None:
        theta = float(np.clip(spec.theta, THETA_MIN, THETA_MAX))
        fam = NegBinLog(theta)
        lams, state, _, gcv_trace = select(fam)
    else:
        ybar, yvar = y.mean(), y.var(ddof=1)
        theta = float(np.clip(ybar**2 / (yvar - ybar), THETA_MIN, THETA_MAX)) if yvar > ybar else THETA_MAX
        theta_converged = False
        ix = None
        for _ in range(MAX_THETA_ITER):
            fam = NegBinLog(theta)
            lams, state, ix, gcv_trace = select(fam, ix)
            theta_trace.append(theta)
            new = nb_theta_moment(y, state.mu, fitter.n - state.edf_total)
            if abs(new - theta) <= THETA_TOL * theta:
                theta_converged = True
                if new != theta:
                    theta = new
                    fam = NegBinLog(theta)
                    state = run(fam, lams)
                    theta_trace.append(theta)
                break
            theta = new
        if not theta_converged:
            logger.warning("theta did not converge in %d iterations", MAX_THETA_ITER)

    if gaussian:
        scale = state.deviance / max(fitter.n - state.edf_total, 1e-12)
    else:
        scale = 1.0
    vcov = state.chol.inverse() * scale

    mu = state.mu
    resid = y - mu
    if gaussian:
        null_dev = float(np.sum((y - y.mean()) ** 2))
        loglik = fam.loglik(y, mu, state.deviance / fitter.n) if state.deviance > 0 else math.inf
        n_extra = 1
    else:
        null_dev = fam.deviance(y, np.full_like(y, y.mean()))
        loglik = fam.loglik(y, mu)
        n_extra = 0 if spec.theta is not None else 1
    if null_dev > 0:
        dev_expl = float(np.clip(1.0 - state.deviance / null_dev, 0.0, 1.0))
    else:
        dev_expl = 1.0 if state.deviance == 0 else 0.0
    tss = float(np.sum((y - y.mean()) ** 2))
    rdf = fitter.n - state.edf_total
    r2_adj = 1.0 - (float(resid @ resid) / rdf) / (tss / (fitter.n - 1)) if tss > 0 and rdf > 0 else float("nan")
    aic = -2.0 * loglik + 2.0 * (state.edf_total + n_extra)

    edf = {b.label: float(state.edf_coef[b.cols].sum()) for b in design.blocks}
    pdev_change = abs(state.pdev_trace[-1] - state.pdev_trace[-2]) if len(state.pdev_trace) > 1 else 0.0
    converged = state.converged and theta_converged
    if not converged:
        logger.warning("fit for %s did not converge", spec.response)
    logger.debug("fit %s: %d iterations, final penalised deviance change %.3g", spec.response, state.iterations, pdev_change)

    return GamFit(
        spec=spec,
        design=design,
        coef_names=list(design.coef_names),
        coefficients=state.beta,
        vcov=vcov,
        lambdas={label: float(l) for (label, _, _), l in zip(design.penalties, lams)},
        theta=theta,
        edf=edf,
        edf_coef=state.edf_coef,
        fitted=mu,
        residuals=resid,
        deviance=state.deviance,
        null_deviance=null_dev,
        deviance_explained=dev_expl,
        r2_adjusted=float(r2_adj),
        aic=float(aic),
        scale=float(scale),
        n=fitter.n,
        converged=converged,
        iterations=state.iterations,
        pdev_trace=list(state.pdev_trace),
        gcv_score=state.gcv,
        gcv_trace=gcv_trace,
        theta_trace=theta_trace,
        X=X,
    )
