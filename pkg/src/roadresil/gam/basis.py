"""Cubic regression spline and tensor-product interaction bases.

The cubic regression spline is parameterised by its values at ``k`` knots
placed at evenly spaced quantiles of the unique covariate values. Second
derivatives at the knots follow from the natural-spline conditions, giving

    B delta = D beta,   penalty S = D^T B^{-1} D,

where ``D`` is the (k-2) x k second-difference operator scaled by knot
spacings and ``B`` the tridiagonal (k-2) x (k-2) matrix. ``S`` integrates the
squared second derivative, so constants and straight lines are unpenalised.
Outside the knot range the spline continues linearly.

Both bases are centred with a sum-to-zero constraint over the fitting data,
which removes one column.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg


def _penalty_scale(X: np.ndarray, S: np.ndarray) -> float:
    """Factor bringing ``S`` onto the scale of ``X^T X``."""
    xn = np.linalg.norm(X, ord=np.inf) ** 2
    sn = np.linalg.norm(S, ord=np.inf)
    return xn / sn if sn > 0 else 1.0


def _sum_to_zero(X: np.ndarray) -> np.ndarray:
    """Null-space basis ``Z`` of the constraint ``1^T X Z = 0``."""
    c = X.sum(axis=0).reshape(-1, 1)
    q, _ = np.linalg.qr(c, mode="complete")
    return q[:, 1:]


class CubicRegressionSpline:
    """Centred cubic regression spline for one covariate."""

    def __init__(self, x, k: int = 10):
        x = np.asarray(x, dtype=float)
        if k < 3:
            raise ValueError("basis dimension k must be >= 3")
        ux = np.unique(x)
        if ux.size < k:
            raise ValueError(f"only {ux.size} distinct values for a basis of dimension {k}; use a smaller k")
        self.k = k
        self.knots = ux[np.round(np.linspace(0, ux.size - 1, k)).astype(int)]
        h = np.diff(self.knots)
        D = np.zeros((k - 2, k))
        B = np.zeros((k - 2, k - 2))
        for i in range(k - 2):
            D[i, i] = 1.0 / h[i]
            D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
            D[i, i + 2] = 1.0 / h[i + 1]
            B[i, i] = (h[i] + h[i + 1]) / 3.0
            if i < k - 3:
                B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
        Binv_D = linalg.solve(B, D, assume_a="pos")
        self.F = np.vstack([np.zeros(k), Binv_D, np.zeros(k)])
        self.S_raw = D.T @ Binv_D
        self.S_raw = 0.5 * (self.S_raw + self.S_raw.T)

        X = self.raw_basis(x)
        self.Z = _sum_to_zero(X)
        Xc = X @ self.Z
        S = self.Z.T @ self.S_raw @ self.Z
        self.scale = _penalty_scale(Xc, S)
        self.S = S * self.scale
        self.x_range = (float(x.min()), float(x.max()))

    @property
    def dim(self) -> int:
        return self.k - 1

    def raw_basis(self, x) -> np.ndarray:
        """Uncentred n x k basis whose coefficients are values at the knots."""
        x = np.asarray(x, dtype=float)
        kn = self.knots
        k = self.k
        n = x.size
        out = np.zeros((n, k))
        h = np.diff(kn)

        inside = (x >= kn[0]) & (x <= kn[-1])
        xi = x[inside]
        j = np.clip(np.searchsorted(kn, xi, side="right") - 1, 0, k - 2)
        hj = h[j]
        am = (kn[j + 1] - xi) / hj
        ap = (xi - kn[j]) / hj
        cm = ((kn[j + 1] - xi) ** 3 / hj - hj * (kn[j + 1] - xi)) / 6.0
        cp = ((xi - kn[j]) ** 3 / hj - hj * (xi - kn[j])) / 6.0
        rows = np.flatnonzero(inside)
        sub = cm[:, None] * self.F[j] + cp[:, None] * self.F[j + 1]
        sub[np.arange(xi.size), j] += am
        sub[np.arange(xi.size), j + 1] += ap
        out[rows] = sub

        lo = x < kn[0]
        if lo.any():
            d = x[lo] - kn[0]
            # f'(x_1) = (b_2 - b_1)/h_1 - h_1 delta_2 / 6
            deriv = -h[0] / 6.0 * self.F[1]
            deriv = deriv.copy()
            deriv[0] += -1.0 / h[0]
            deriv[1] += 1.0 / h[0]
            row = np.zeros(k)
            row[0] = 1.0
            out[lo] = row + d[:, None] * deriv
        hi = x > kn[-1]
        if hi.any():
            d = x[hi] - kn[-1]
            # f'(x_k) = (b_k - b_{k-1})/h + h delta_{k-1} / 6
            deriv = h[-1] / 6.0 * self.F[k - 2]
            deriv = deriv.copy()
            deriv[k - 2] += -1.0 / h[-1]
            deriv[k - 1] += 1.0 / h[-1]
            row = np.zeros(k)
            row[k - 1] = 1.0
            out[hi] = row + d[:, None] * deriv
        return out

    def basis(self, x) -> np.ndarray:
        return self.raw_basis(x) @ self.Z


def cr_basis(x, k: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Centred basis (n x (k-1)) and its scaled penalty ((k-1) x (k-1))."""
    sp = CubicRegressionSpline(x, k)
    return sp.basis(x), sp.S


def _row_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


class TensorInteraction:
    """Interaction-only tensor product of two centred marginal splines.

    Main effects are excluded because each marginal is already centred, so
    the product spans only the interaction. Each marginal direction carries
    its own penalty and smoothing parameter.
    """

    def __init__(self, x1, x2, k1: int = 5, k2: int = 5):
        self.m1 = CubicRegressionSpline(x1, k1)
        self.m2 = CubicRegressionSpline(x2, k2)
        X = self.basis(x1, x2)
        d1, d2 = self.m1.dim, self.m2.dim
        S1 = np.kron(self.m1.S, np.eye(d2))
        S2 = np.kron(np.eye(d1), self.m2.S)
        self.S = [S1 * _penalty_scale(X, S1), S2 * _penalty_scale(X, S2)]

    @property
    def dim(self) -> int:
        return self.m1.dim * self.m2.dim

    def basis(self, x1, x2) -> np.ndarray:
        return _row_kron(self.m1.basis(x1), self.m2.basis(x2))


def tensor_basis(x1, x2, k1: int = 5, k2: int = 5) -> tuple[np.ndarray, list[np.ndarray]]:
    """Interaction basis (n x (k1-1)(k2-1)) and its two marginal penalties."""
    t = TensorInteraction(x1, x2, k1, k2)
    return t.basis(x1, x2), t.S
