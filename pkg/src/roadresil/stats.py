"""Standardisation, Welch t-tests, VIF screening and stepwise selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats as sps

logger = logging.getLogger(__name__)

VIF_LIMIT = 5.0


def significance_code(p: float) -> str:
    """R-style stars: 0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1."""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return ""


# --- standardisation -------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    mean: float
    sd: float

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / (2.0 * self.sd)

    def inverse(self, z):
        return np.asarray(z, dtype=float) * (2.0 * self.sd) + self.mean


def standardize_2sd(values) -> tuple[np.ndarray, Standardizer]:
    """Centre and divide by twice the sample (n - 1) standard deviation."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two values to standardise")
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise ValueError("zero standard deviation; drop the constant column")
    st = Standardizer(float(np.mean(x)), sd)
    return st.transform(x), st


# --- Welch t-test ----------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    labels: tuple[str, str]
    mean_a: float
    mean_b: float
    sd_a: float
    sd_b: float
    diff: float
    ci95: tuple[float, float]
    t_stat: float
    df: float
    p_value: float

    @property
    def significance_code(self) -> str:
        return significance_code(self.p_value)


def welch_ttest(a, b, labels: tuple[str, str] = ("a", "b")) -> TTestResult:
    """Unequal-variance two-sample t-test of ``mean(a) - mean(b)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        raise ValueError("both samples have zero variance")
    qa, qb = va / a.size, vb / b.size
    se = math.sqrt(qa + qb)
    diff = float(a.mean() - b.mean())
    t = diff / se
    df = (qa + qb) ** 2 / (qa**2 / (a.size - 1) + qb**2 / (b.size - 1))
    p = float(min(1.0, 2.0 * sps.t.sf(abs(t), df)))
    half = float(sps.t.ppf(0.975, df)) * se
    return TTestResult(
        labels=tuple(labels),
        mean_a=float(a.mean()),
        mean_b=float(b.mean()),
        sd_a=math.sqrt(va),
        sd_b=math.sqrt(vb),
        diff=diff,
        ci95=(diff - half, diff + half),
        t_stat=float(t),
        df=float(df),
        p_value=p,
    )


# --- VIF -------------------------------------------------------------------


@dataclass(frozen=True)
class VifResult:
    names: tuple[str, ...]
    values: np.ndarray
    collinear: tuple[str, ...]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))

    def keep(self, limit: float = VIF_LIMIT) -> list[str]:
        return [n for n, v in zip(self.names, self.values) if v <= limit]


def vif(columns: Mapping[str, Sequence[float]] | np.ndarray, names: Optional[Sequence[str]] = None) -> VifResult:
    """``1 / (1 - R^2_k)`` regressing each column on the others plus an intercept.

    Exactly collinear columns get ``inf`` and are listed in ``collinear``.
    """
    if isinstance(columns, Mapping):
        names = list(columns)
        X = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    else:
        X = np.asarray(columns, dtype=float)
        names = list(names) if names is not None else [f"x{i}" for i in range(X.shape[1])]
    n, p = X.shape
    if p < 2:
        raise ValueError("VIF needs at least two columns")
    if n <= p:
        raise ValueError("VIF needs more rows than columns")
    out = np.empty(p)
    flagged = []
    for k in range(p):
        y = X[:, k]
        others = np.column_stack([np.ones(n), np.delete(X, k, axis=1)])
        q, r = np.linalg.qr(others)
        resid = y - q @ (q.T @ y)
        tss = float(np.sum((y - y.mean()) ** 2))
        rss = float(resid @ resid)
        if tss == 0 or rss <= 1e-12 * tss:
            out[k] = np.inf
            flagged.append(names[k])
        else:
            out[k] = tss / rss
    return VifResult(tuple(names), out, tuple(flagged))


# --- stepwise --------------------------------------------------------------


@dataclass(frozen=True)
class StepwiseResult:
    selected: tuple[str, ...]
    aic: float
    history: tuple[tuple[Optional[str], float], ...]
    skipped: tuple[str, ...] = ()


def forward_stepwise_aic(
    candidates: Sequence[str],
    fitter: Callable[[Sequence[str]], float],
) -> StepwiseResult:
    """Greedy forward selection on AIC.

    ``fitter(terms)`` returns the AIC of the model with those terms (an empty
    list is the intercept-only model). Each round adds the candidate with the
    lowest AIC, ties broken by name; selection stops when nothing lowers the
    AIC. Candidates whose fit raises are skipped for the rest of the search.
    """
    selected: list[str] = []
    current = float(fitter([]))
    history = [(None, current)]
    pool = sorted(set(candidates))
    skipped = []
    while pool:
        scores = {}
        for c in pool:
            try:
                scores[c] = float(fitter(selected + [c]))
            except Exception as exc:  # noqa: BLE001 - any fitter failure disqualifies the candidate
                logger.warning("stepwise: candidate %s skipped (%s)", c, exc)
                skipped.append(c)
        pool = [c for c in pool if c in scores]
        if not scores:
            break
        best = min(scores, key=lambda c: (scores[c], c))
        if not scores[best] < current:
            break
        selected.append(best)
        current = scores[best]
        history.append((best, current))
        pool.remove(best)
    return StepwiseResult(tuple(selected), current, tuple(history), tuple(skipped))


def gaussian_aic(rss: float, n: int, n_coef: float) -> float:
    """AIC of a Gaussian model with ML variance: one extra parameter for it."""
    sigma2 = rss / n
    loglik = -0.5 * n * (math.log(2 * math.pi * sigma2) + 1.0)
    return -2.0 * loglik + 2.0 * (n_coef + 1)


def ols_aic_fitter(data: Mapping[str, Sequence[float]], response: Sequence[float]) -> Callable[[Sequence[str]], float]:
    """A fitter for :func:`forward_stepwise_aic` backed by least squares."""
    y = np.asarray(response, dtype=float)
    cols = {k: np.asarray(v, dtype=float) for k, v in data.items()}

    def fit(terms):
        X = np.column_stack([np.ones(y.size)] + [cols[t] for t in terms])
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        r = y - X @ beta
        return gaussian_aic(float(r @ r), y.size, X.shape[1])

    return fit


def rate_effect(beta: float) -> float:
    """Percent change implied by a log-link coefficient, ``100 (1 - e^beta)``.

    Positive values are reductions: ``rate_effect(-0.765)`` is about 53.47.
    """
    if not math.isfinite(beta):
        raise ValueError("beta must be finite")
    return 100.0 * -math.expm1(beta)
