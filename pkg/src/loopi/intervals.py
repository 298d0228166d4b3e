"""Leave-one-out residuals and the prediction intervals built from them."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .estimators import EstimatorSpec, FitError, FitResult, fit, fit_on_subset

SIDES = ("two-sided", "lower-only", "upper-only")
LEVERAGE_GUARD = 1e-12


class SingularDesignError(ValueError):
    """OLS hat shortcut requested for a design without full column rank."""


class DegenerateLeverageError(ValueError):
    """Some hat value is numerically equal to one."""


def empirical_quantile(sample, t: float) -> float:
    """Generalized inverse of the empirical cdf: ``inf{u : F_m(u) >= t}``.

    This is the ``ceil(m t)``-th order statistic, with no interpolation.
    """
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    m = x.size
    if m == 0:
        raise ValueError("empirical quantile of an empty sample")
    if not 0 < t < 1:
        raise ValueError(f"quantile level must lie in (0, 1), got {t}")
    k = math.ceil(m * t)
    # guard against m*t landing just above an integer in floating point
    while k > 1 and (k - 1) / m >= t:
        k -= 1
    k = min(max(k, 1), m)
    return float(x[k - 1])


@dataclass
class LooResiduals:
    values: np.ndarray
    method: str
    estimator: EstimatorSpec

    def __len__(self):
        return self.values.size

    def quantile(self, t: float) -> float:
        return empirical_quantile(self.values, t)


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    alpha: float
    point: float
    side: str = "two-sided"

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, y):
        y = np.asarray(y, dtype=float)
        return (y >= self.lower) & (y <= self.upper)


def loo_residuals_generic(spec: EstimatorSpec, X, Y, *, full_fit: FitResult | None = None,
                          max_workers: int | None = None) -> LooResiduals:
    """Refit without each row and predict that row.

    Iterative estimators are warm-started from the full-data fit. Refits are
    independent, so ``max_workers > 1`` runs them on a thread pool; the
    result does not depend on the worker count.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = X.shape[0]
    if n < 2:
        raise ValueError("leave-one-out residuals need n >= 2")
    warm = None
    if spec.iterative:
        if full_fit is None:
            full_fit = fit(spec, X, Y)
        warm = full_fit.beta_hat

    def one(i: int) -> float:
        try:
            res = fit_on_subset(spec, X, Y, (i,), warm_start=warm)
        except Exception as exc:
            raise FitError(f"refit without row {i} failed: {exc}") from exc
        if not res.converged:
            warnings.warn(f"refit without row {i} did not converge", RuntimeWarning, stacklevel=3)
        return float(Y[i] - X[i] @ res.beta_hat)

    if max_workers is not None and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            values = np.array(list(pool.map(one, range(n))))
    else:
        values = np.array([one(i) for i in range(n)])
    return LooResiduals(values, "brute-force", spec)


def hat_values(kind: str, X, lam: float | None = None):
    """Diagonal of ``X (X'X + lam I)^{-1} X'`` from one thin SVD of ``X``.

    ``lam = 0`` for OLS. Returns ``(h, U, shrink)`` where the hat matrix is
    ``U diag(shrink) U'``.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    if kind == "ols":
        tol = np.finfo(float).eps * max(n, p) * (s[0] if s.size else 0.0)
        if p > n or s[-1] <= tol:
            raise SingularDesignError("X'X is singular; use the generic leave-one-out path")
        shrink = np.ones_like(s)
    elif kind == "ridge":
        shrink = s ** 2 / (s ** 2 + lam)
    else:
        raise ValueError(f"hat shortcut is only defined for ols and ridge, not {kind}")
    h = np.einsum("ij,j,ij->i", U, shrink, U)
    return h, U, shrink


def loo_residuals_hat_shortcut(spec: EstimatorSpec, X, Y) -> LooResiduals:
    """``u_i / (1 - h_i)`` for OLS (full column rank) and ridge."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    h, U, shrink = hat_values(spec.kind, X, spec.lam)
    if spec.kind == "ols" and h.max() > 0.5:
        # 1 - h and the residuals from a basis of col(X)^perp: no cancellation near h = 1
        Q = np.linalg.qr(X, mode="complete")[0][:, X.shape[1]:]
        one_minus_h = np.einsum("ij,ij->i", Q, Q)
        resid = Q @ (Q.T @ Y)
    else:
        one_minus_h = 1 - h
        resid = Y - U @ (shrink * (U.T @ Y))
    if np.any(one_minus_h <= LEVERAGE_GUARD):
        i = int(np.argmin(one_minus_h))
        raise DegenerateLeverageError(f"hat value h[{i}] = {1 - one_minus_h[i]!r} is within 1e-12 of one")
    return LooResiduals(resid / one_minus_h, "hat-shortcut", spec)


def loo_residuals(spec: EstimatorSpec, X, Y, *, full_fit: FitResult | None = None) -> LooResiduals:
    """Use the hat shortcut where it applies, brute-force refits otherwise."""
    if spec.kind in ("ols", "ridge"):
        try:
            return loo_residuals_hat_shortcut(spec, X, Y)
        except (SingularDesignError, DegenerateLeverageError):
            pass
    return loo_residuals_generic(spec, X, Y, full_fit=full_fit)


def quantile_offsets(residuals, alpha: float, side: str = "two-sided") -> tuple[float, float]:
    """Lower and upper offsets added to the point forecast."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if side == "two-sided":
        return empirical_quantile(residuals, alpha / 2), empirical_quantile(residuals, 1 - alpha / 2)
    if side == "lower-only":
        return empirical_quantile(residuals, alpha), math.inf
    if side == "upper-only":
        return -math.inf, empirical_quantile(residuals, 1 - alpha)
    raise ValueError(f"side must be one of {SIDES}, got {side!r}")


def _warn_small(m: int, alpha: float):
    if m < math.ceil(2 / alpha):
        warnings.warn(f"only {m} residuals for alpha={alpha}; at least {math.ceil(2 / alpha)} "
                      "are needed for the outer quantiles to be distinct order statistics",
                      RuntimeWarning, stacklevel=3)


def build_interval(x0, beta_hat, loo: LooResiduals, alpha: float,
                   side: str = "two-sided") -> PredictionInterval:
    """``[x0'b + q(alpha/2), x0'b + q(1 - alpha/2)]`` from leave-one-out residuals.

    One-sided variants use ``q(alpha)`` or ``q(1 - alpha)`` with the other
    end at infinity.
    """
    lo, hi = quantile_offsets(loo.values, alpha, side)
    _warn_small(len(loo), alpha)
    point = float(np.dot(np.asarray(x0, dtype=float), np.asarray(beta_hat, dtype=float)))
    return PredictionInterval(point + lo, point + hi, alpha, point, side)


def split_point(n: int, nu: float) -> int:
    """Number of rows used for fitting in the sample-splitting variant."""
    if not 0 < nu < 1:
        raise ValueError(f"nu must lie in (0, 1), got {nu}")
    # round before ceil so that e.g. 0.7 * 10 does not become 8
    return math.ceil(round(nu * n, 9))


def build_split_interval(spec: EstimatorSpec, X, Y, x0, nu: float, alpha: float,
                         side: str = "two-sided") -> PredictionInterval:
    """Fit on the first ``ceil(nu n)`` rows, take quantiles of the holdout residuals."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = X.shape[0]
    m = split_point(n, nu)
    if m < 1 or m >= n:
        raise ValueError(f"split at {m} of {n} rows leaves an empty part")
    res = fit(spec, X[:m], Y[:m])
    holdout = Y[m:] - X[m:] @ res.beta_hat
    if holdout.size == 1:
        warnings.warn("holdout has a single row; the interval has zero width",
                      RuntimeWarning, stacklevel=2)
    lo, hi = quantile_offsets(holdout, alpha, side)
    point = float(np.dot(np.asarray(x0, dtype=float), res.beta_hat))
    return PredictionInterval(point + lo, point + hi, alpha, point, side)


def prediction_interval(spec: EstimatorSpec, X, Y, x0, alpha: float,
                        side: str = "two-sided") -> PredictionInterval:
    """Fit, compute leave-one-out residuals and build the interval at ``x0``."""
    full = fit(spec, X, Y)
    loo = loo_residuals(spec, X, Y, full_fit=full)
    return build_interval(x0, full.beta_hat, loo, alpha, side)
