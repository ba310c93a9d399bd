"""Tabular summaries of a fitted GAM."""
from __future__ import annotations

import numpy as np
import pandas as pd
from scipy import stats as sps

from roadresil.gam.fit import GamFit
from roadresil.stats import significance_code

SUMMARY_COLUMNS = ["section", "term", "estimate", "ci_lo", "ci_hi", "std_err", "edf", "statistic", "p_value", "stars"]
CI_NOTE = "confidence intervals are model-based (penalised-fit covariance), not robust"


def summarize_fit(fit: GamFit) -> list[dict]:
    """Rows shaped like a published GAM table.

    Parametric coefficients come first with 95% intervals and significance
    codes, then smooth terms with e.d.f. and an approximate Wald test, then
    fit statistics.
    """
    rows = []
    ci = fit.conf_int()
    se = np.sqrt(np.diag(fit.vcov))
    gaussian = fit.spec.family == "GaussianIdentity"
    for b in fit.design.blocks:
        if b.kind != "parametric":
            continue
        for j in range(b.cols.start, b.cols.stop):
            z = fit.coefficients[j] / se[j] if se[j] > 0 else np.inf
            if gaussian:
                p = float(2 * sps.t.sf(abs(z), fit.residual_df))
            else:
                p = float(2 * sps.norm.sf(abs(z)))
            rows.append(
                dict(
                    section="parametric", term=fit.coef_names[j], estimate=float(fit.coefficients[j]),
                    ci_lo=float(ci[j, 0]), ci_hi=float(ci[j, 1]), std_err=float(se[j]), edf=None,
                    statistic=float(z), p_value=p, stars=significance_code(p),
                )
            )
    for b in fit.design.blocks:
        if b.kind != "smooth":
            continue
        stat, _, p = fit.smooth_test(b.label)
        rows.append(
            dict(
                section="smooth", term=b.label, estimate=None, ci_lo=None, ci_hi=None, std_err=None,
                edf=fit.edf[b.label], statistic=stat, p_value=p, stars=significance_code(p),
            )
        )
    stats = [
        ("r2_adjusted", fit.r2_adjusted),
        ("deviance_explained", fit.deviance_explained),
        ("aic", fit.aic),
        ("n", float(fit.n)),
        ("edf_total", fit.edf_total),
        ("scale", fit.scale),
    ]
    if fit.theta is not None:
        stats.append(("theta", fit.theta))
    for label, lam in fit.lambdas.items():
        stats.append((f"lambda:{label}", lam))
    stats.append(("converged", float(fit.converged)))
    for name, value in stats:
        rows.append(dict(section="fit", term=name, estimate=float(value), ci_lo=None, ci_hi=None, std_err=None,
                         edf=None, statistic=None, p_value=None, stars=""))
    return rows


def summary_frame(fit: GamFit) -> pd.DataFrame:
    return pd.DataFrame(summarize_fit(fit), columns=SUMMARY_COLUMNS)


SMOOTH_COLUMNS = ["term", "x", "y", "fit", "se", "lo", "hi"]


def smooth_curves(fit: GamFit, data, n_points: int = 100, n_grid: int = 20) -> list[list]:
    """Partial-effect curves with 95% bands for every smooth term.

    Univariate smooths are evaluated on ``n_points`` evenly spaced values
    spanning the data; the tensor term on an ``n_grid`` x ``n_grid`` lattice.
    """
    df = pd.DataFrame(data)
    rows = []
    for st in fit.spec.smooth_terms:
        x = np.asarray(df[st.variable], dtype=float)
        grid = np.linspace(x.min(), x.max(), n_points)
        f, se = fit.partial_effect(st.label, {st.variable: grid})
        for xi, fi, si in zip(grid, f, se):
            rows.append([st.label, float(xi), None, float(fi), float(si), float(fi - 1.96 * si), float(fi + 1.96 * si)])
    tt = fit.spec.tensor_term
    if tt is not None:
        v1, v2 = tt.variables
        g1 = np.linspace(df[v1].min(), df[v1].max(), n_grid)
        g2 = np.linspace(df[v2].min(), df[v2].max(), n_grid)
        a, b = np.meshgrid(g1, g2, indexing="ij")
        f, se = fit.partial_effect(tt.label, {v1: a.ravel(), v2: b.ravel()})
        for xi, yi, fi, si in zip(a.ravel(), b.ravel(), f, se):
            rows.append([tt.label, float(xi), float(yi), float(fi), float(si), float(fi - 1.96 * si), float(fi + 1.96 * si)])
    return rows
