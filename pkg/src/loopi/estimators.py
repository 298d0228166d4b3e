"""Linear coefficient estimators behind one fitting interface.

All estimators fit a model without intercept and are symmetric in the rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import linalg

KINDS = ("ols", "ridge", "lasso", "huber", "james-stein")

# hyperparameter name per kind
_HYPER = {"ridge": "lam", "lasso": "lam", "huber": "k", "james-stein": "c"}
_CONFIG_NAMES = {"lam": "lambda", "k": "k", "c": "c"}


class FitError(RuntimeError):
    """Raised when a fit cannot produce a coefficient vector."""


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    lam: float | None = None
    k: float | None = None
    c: float | None = None
    max_iter: int = 10_000
    tol: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; expected one of {KINDS}")
        needed = _HYPER.get(self.kind)
        if needed is not None:
            value = getattr(self, needed)
            if value is None:
                raise ValueError(f"estimator {self.kind} requires hyperparameter "
                                 f"{_CONFIG_NAMES[needed]!r}")
            if not value > 0:
                raise ValueError(f"estimator {self.kind} needs {_CONFIG_NAMES[needed]} > 0, got {value}")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")

    @property
    def label(self) -> str:
        needed = _HYPER.get(self.kind)
        if needed is None:
            return self.kind
        return f"{self.kind}({_CONFIG_NAMES[needed]}={getattr(self, needed):g})"

    @property
    def iterative(self) -> bool:
        return self.kind in ("lasso", "huber")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        needed = _HYPER.get(self.kind)
        if needed is not None:
            out[_CONFIG_NAMES[needed]] = getattr(self, needed)
        if self.max_iter != 10_000:
            out["max_iter"] = self.max_iter
        if self.tol != 1e-8:
            out["tol"] = self.tol
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EstimatorSpec":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        unknown = set(data) - {"kind", "lam", "k", "c", "max_iter", "tol"}
        if unknown:
            raise ValueError(f"unknown estimator fields {sorted(unknown)}")
        return cls(**data)


@dataclass
class FitResult:
    beta_hat: np.ndarray
    iterations: int = 0
    converged: bool = True
    objective: float | None = None
    kkt_residual: float | None = None
    flags: dict[str, Any] = field(default_factory=dict)


def _pinv_cutoff(s: np.ndarray, n: int, p: int) -> float:
    if s.size == 0:
        return 0.0
    return np.finfo(float).eps * max(n, p) * s[0]


def fit_ols(X, Y) -> FitResult:
    """Minimum-norm least squares ``(X'X)^+ X'Y`` through a thin SVD."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, p = X.shape
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    keep = s > _pinv_cutoff(s, n, p)
    coef = Vt[keep].T @ ((U[:, keep].T @ Y) / s[keep])
    rss = float(np.sum((Y - X @ coef) ** 2))
    return FitResult(coef, objective=0.5 * rss, flags={"rank": int(keep.sum())})


def fit_ridge(X, Y, lam: float) -> FitResult:
    """``(X'X + lam I)^{-1} X'Y``; solved in the dual when ``p > n``."""
    if not lam > 0:
        raise ValueError(f"ridge needs lambda > 0, got {lam}")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, p = X.shape
    if p <= n:
        coef = linalg.solve(X.T @ X + lam * np.eye(p), X.T @ Y, assume_a="pos")
    else:
        coef = X.T @ linalg.solve(X @ X.T + lam * np.eye(n), Y, assume_a="pos")
    resid = Y - X @ coef
    objective = 0.5 * float(resid @ resid) + 0.5 * lam * float(coef @ coef)
    return FitResult(coef, objective=objective)


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def lasso_objective(X, Y, b, lam: float) -> float:
    r = Y - X @ b
    return float(r @ r) / (2 * len(Y)) + lam * float(np.abs(b).sum())


def lasso_kkt_residual(X, Y, b, lam: float) -> float:
    """Largest violation of the subgradient optimality conditions."""
    g = X.T @ (X @ b - Y) / len(Y)
    active = b != 0
    viol = np.where(active, np.abs(g + lam * np.sign(b)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max()) if viol.size else 0.0


def fit_lasso(X, Y, lam: float, *, max_iter: int = 10_000, tol: float = 1e-8,
              warm_start=None) -> FitResult:
    """Cyclic coordinate descent for ``(1/2n)||Y - Xb||^2 + lam ||b||_1``.

    Works on the Gram matrix, so one sweep costs ``O(p^2)``.
    """
    if not lam > 0:
        raise ValueError(f"lasso needs lambda > 0, got {lam}")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, p = X.shape
    G = X.T @ X / n
    corr = X.T @ Y / n
    diag = np.diag(G).copy()
    b = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=float)
    # grad_part = G b, maintained incrementally
    Gb = G @ b
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        max_change = 0.0
        for j in range(p):
            if diag[j] == 0.0:
                new = 0.0
            else:
                z = corr[j] - Gb[j] + diag[j] * b[j]
                new = np.sign(z) * max(abs(z) - lam, 0.0) / diag[j]
            delta = new - b[j]
            if delta != 0.0:
                Gb += delta * G[:, j]
                b[j] = new
                max_change = max(max_change, abs(delta))
        if max_change <= tol:
            converged = True
            break
    return FitResult(b, iterations=it, converged=converged,
                     objective=lasso_objective(X, Y, b, lam),
                     kkt_residual=lasso_kkt_residual(X, Y, b, lam))


def huber_loss(r, k: float):
    a = np.abs(r)
    return np.where(a <= k, 0.5 * r * r, k * a - 0.5 * k * k)


def huber_objective(X, Y, b, k: float) -> float:
    return float(huber_loss(Y - X @ b, k).sum())


def fit_huber(X, Y, k: float, *, max_iter: int = 10_000, tol: float = 1e-8,
              warm_start=None, trace: list | None = None) -> FitResult:
    """Huber M-estimator by iteratively reweighted least squares.

    Starts at the OLS solution unless ``warm_start`` is given. Each step
    minimizes the quadratic majorizer with weights ``min(1, k/|r|)``, so the
    objective never increases. If ``trace`` is a list, the objective after
    every iteration is appended to it.
    """
    if not k > 0:
        raise ValueError(f"huber needs k > 0, got {k}")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, p = X.shape
    b = fit_ols(X, Y).beta_hat if warm_start is None else np.array(warm_start, dtype=float)
    flags: dict[str, Any] = {}
    obj = huber_objective(X, Y, b, k)
    if trace is not None:
        trace.append(obj)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = Y - X @ b
        a = np.abs(r)
        w = np.ones(n)
        big = a > k
        w[big] = k / a[big]
        A = (X.T * w) @ X
        rhs = X.T @ (w * Y)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", linalg.LinAlgWarning)
                new = linalg.solve(A, rhs, assume_a="pos")
        except (linalg.LinAlgError, linalg.LinAlgWarning):
            jitter = 1e-10 * float(np.trace(A))
            flags["jitter"] = jitter
            new = linalg.solve(A + jitter * np.eye(p), rhs, assume_a="pos")
        change = float(np.max(np.abs(new - b))) if p else 0.0
        b = new
        obj = huber_objective(X, Y, b, k)
        if trace is not None:
            trace.append(obj)
        if change <= tol:
            converged = True
            break
    return FitResult(b, iterations=it, converged=converged, objective=obj, flags=flags)


def fit_james_stein(X, Y, c: float) -> FitResult:
    """Shrink OLS by the factor ``1 - c p / (b' X'X b)``.

    When ``X b = 0`` the factor is undefined; the zero vector is returned
    with ``flags["degenerate_shrinkage"]`` set.
    """
    if not c > 0:
        raise ValueError(f"james-stein needs c > 0, got {c}")
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    ols = fit_ols(X, Y).beta_hat
    fitted = X @ ols
    quad = float(fitted @ fitted)
    if quad <= np.finfo(float).tiny:
        return FitResult(np.zeros(p), flags={"degenerate_shrinkage": True})
    factor = 1.0 - c * p / quad
    return FitResult(factor * ols, flags={"shrinkage_factor": factor})


def fit(spec: EstimatorSpec, X, Y, warm_start=None) -> FitResult:
    """Dispatch on ``spec.kind``. ``warm_start`` is used by iterative kinds only."""
    kind = spec.kind
    if kind == "ols":
        return fit_ols(X, Y)
    if kind == "ridge":
        return fit_ridge(X, Y, spec.lam)
    if kind == "lasso":
        return fit_lasso(X, Y, spec.lam, max_iter=spec.max_iter, tol=spec.tol,
                         warm_start=warm_start)
    if kind == "huber":
        return fit_huber(X, Y, spec.k, max_iter=spec.max_iter, tol=spec.tol,
                         warm_start=warm_start)
    return fit_james_stein(X, Y, spec.c)


def fit_on_subset(spec: EstimatorSpec, X, Y, excluded=(), warm_start=None) -> FitResult:
    """Fit on the rows of ``(X, Y)`` not listed in ``excluded``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = X.shape[0]
    keep = np.ones(n, dtype=bool)
    excluded = np.unique(np.asarray(list(excluded), dtype=int))
    if excluded.size:
        if excluded.min() < 0 or excluded.max() >= n:
            raise IndexError(f"excluded indices out of range for n={n}")
        keep[excluded] = False
    if not keep.any():
        raise ValueError("no rows left after exclusion")
    if keep.all():
        return fit(spec, X, Y, warm_start)
    return fit(spec, X[keep], Y[keep], warm_start)
