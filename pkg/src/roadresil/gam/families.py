"""Exponential-family pieces used by penalised IRLS."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, xlogy

THETA_MIN = 1e-3
THETA_MAX = 1e6
_ETA_CLIP = 30.0


class GaussianIdentity:
    name = "GaussianIdentity"
    scale_known = False

    def link(self, mu):
        return mu

    def inverse(self, eta):
        return eta

    def dmu_deta(self, eta):
        return np.ones_like(eta)

    def variance(self, mu):
        return np.ones_like(mu)

    def init_mu(self, y):
        return np.asarray(y, dtype=float).copy()

    def deviance(self, y, mu):
        r = y - mu
        return float(r @ r)

    def loglik(self, y, mu, scale):
        """Log-likelihood with variance ``scale``."""
        n = y.size
        return -0.5 * (self.deviance(y, mu) / scale + n * math.log(2 * math.pi * scale))


class NegBinLog:
    """Negative binomial with log link; ``Var(y) = mu + mu^2 / theta``."""

    name = "NegBinLog"
    scale_known = True

    def __init__(self, theta: float):
        if not theta > 0:
            raise ValueError("theta must be positive")
        self.theta = float(theta)

    def link(self, mu):
        return np.log(mu)

    def inverse(self, eta):
        return np.exp(np.clip(eta, -_ETA_CLIP, _ETA_CLIP))

    def dmu_deta(self, eta):
        return self.inverse(eta)

    def variance(self, mu):
        return mu + mu * mu / self.theta

    def init_mu(self, y):
        y = np.asarray(y, dtype=float)
        return y + 0.1 * (y.mean() + 0.1)

    def deviance(self, y, mu):
        th = self.theta
        d = xlogy(y, y / mu) - (y + th) * np.log((y + th) / (mu + th))
        return float(2.0 * np.sum(d))

    def loglik(self, y, mu, scale=1.0):
        th = self.theta
        ll = (
            gammaln(y + th) - gammaln(th) - gammaln(y + 1)
            + th * np.log(th / (th + mu)) + xlogy(y, mu / (th + mu))
        )
        return float(np.sum(ll))

    def score(self, X, y, beta):
        """Gradient of :meth:`loglik` with respect to ``beta`` (log link)."""
        mu = self.inverse(X @ beta)
        return X.T @ ((y - mu) * self.theta / (self.theta + mu))


def nb_theta_moment(y, mu, resid_df: float) -> float:
    """Theta solving ``sum (y - mu)^2 / (mu + mu^2/theta) = resid_df``.

    The Pearson statistic rises with theta, so the root is bracketed on
    ``[THETA_MIN, THETA_MAX]``; values outside clip to the bounds.
    """
    from scipy.optimize import brentq

    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    r2 = (y - mu) ** 2

    def g(log_theta):
        th = math.exp(log_theta)
        return float(np.sum(r2 / (mu + mu * mu / th))) - resid_df

    lo, hi = math.log(THETA_MIN), math.log(THETA_MAX)
    if g(hi) <= 0:
        return THETA_MAX
    if g(lo) >= 0:
        return THETA_MIN
    return math.exp(brentq(g, lo, hi, xtol=1e-12, rtol=1e-12))


def make_family(name: str, theta: float = 1.0):
    key = name.replace("_", "").replace("-", "").lower()
    if key in ("gaussianidentity", "gaussian"):
        return GaussianIdentity()
    if key in ("negbinlog", "negbin", "nb", "negativebinomial"):
        return NegBinLog(theta)
    raise ValueError(f"unknown family {name!r}")
