"""Data generating process for elliptical linear regression designs.

Rows are ``x_i = S l_i v_i`` where ``S`` is the symmetric positive definite
square root of the design covariance, ``l_i`` is a scalar with
``E[l^2] = 1`` bounded away from zero, and ``v_i`` has i.i.d. standardized
entries. Responses are ``y_i = x_i' beta + sigma u_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import linalg, stats

L_KINDS = ("constant", "two-point", "scaled-uniform")
V_KINDS = ("normal", "rademacher", "uniform", "t")
U_KINDS = ("normal", "t", "exponential", "two-point")


@dataclass(frozen=True)
class Law:
    """A scalar distribution used for ``l``, ``v`` or ``u``.

    ``kind`` selects the family. Extra fields are only read by the families
    that need them: ``df`` for ``t``, ``values``/``probs`` for
    ``two-point``, ``ratio`` (lower/upper end) for ``scaled-uniform``.
    Student t draws are rescaled to unit variance whenever ``df > 2``.
    """

    kind: str
    df: float | None = None
    values: tuple[float, ...] | None = None
    probs: tuple[float, ...] | None = None
    ratio: float | None = None

    def __post_init__(self):
        if self.kind == "t":
            if self.df is None or self.df <= 0:
                raise ValueError(f"t law needs df > 0, got df={self.df}")
        if self.kind == "two-point":
            values = self.values if self.values is not None else (-1.0, 1.0)
            probs = self.probs if self.probs is not None else (0.5, 0.5)
            if len(values) != 2 or len(probs) != 2:
                raise ValueError("two-point law needs exactly two values and two probs")
            if min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
                raise ValueError(f"two-point probs must be non-negative and sum to 1, got {probs}")
            object.__setattr__(self, "values", tuple(float(x) for x in values))
            object.__setattr__(self, "probs", tuple(float(x) for x in probs))
        if self.kind == "scaled-uniform":
            if self.ratio is None or not 0 < self.ratio < 1:
                raise ValueError(f"scaled-uniform law needs 0 < ratio < 1, got {self.ratio}")
        if self.kind not in {"constant", "normal", "rademacher", "uniform", "t",
                             "exponential", "two-point", "scaled-uniform"}:
            raise ValueError(f"unknown law kind {self.kind!r}")

    # -- sampling ---------------------------------------------------------
    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        kind = self.kind
        if kind == "constant":
            return np.ones(size)
        if kind == "normal":
            return rng.standard_normal(size)
        if kind == "rademacher":
            return rng.choice(np.array([-1.0, 1.0]), size=size)
        if kind == "uniform":
            return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size)
        if kind == "t":
            draws = rng.standard_t(self.df, size)
            if self.df > 2:
                draws *= math.sqrt((self.df - 2) / self.df)
            return draws
        if kind == "exponential":
            return rng.standard_exponential(size) - 1.0
        if kind == "two-point":
            return rng.choice(np.asarray(self.values), size=size, p=np.asarray(self.probs))
        # scaled-uniform on [ratio*s, s] with E[l^2] = 1
        s = self._uniform_scale()
        return rng.uniform(self.ratio * s, s, size)

    def _uniform_scale(self) -> float:
        r = self.ratio
        return math.sqrt(3.0 / (1.0 + r + r * r))

    # -- analytic moments -------------------------------------------------
    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return 1.0
        if self.kind == "two-point":
            return float(np.dot(self.values, self.probs))
        if self.kind == "scaled-uniform":
            return 0.5 * (1 + self.ratio) * self._uniform_scale()
        if self.kind == "t" and self.df <= 1:
            return math.nan
        return 0.0

    @property
    def second_moment(self) -> float:
        if self.kind == "two-point":
            return float(np.dot(np.square(self.values), self.probs))
        if self.kind == "t" and self.df <= 2:
            return math.inf
        return 1.0

    @property
    def variance(self) -> float:
        return self.second_moment - self.mean ** 2

    @property
    def skewness(self) -> float:
        if self.kind == "exponential":
            return 2.0
        if self.kind == "two-point":
            (a, b), (pa, pb) = self.values, self.probs
            mu = self.mean
            var = self.variance
            if var == 0:
                return math.nan
            return (pa * (a - mu) ** 3 + pb * (b - mu) ** 3) / var ** 1.5
        if self.kind == "scaled-uniform":
            return 0.0
        if self.kind == "t" and self.df <= 3:
            return math.nan
        return 0.0

    @property
    def min_abs(self) -> float:
        """Essential infimum of ``|X|`` (0 for laws with mass near zero)."""
        if self.kind in ("constant", "rademacher"):
            return 1.0
        if self.kind == "two-point":
            return min(abs(x) for x in self.values)
        if self.kind == "scaled-uniform":
            return self.ratio * self._uniform_scale()
        return 0.0

    @property
    def is_discrete(self) -> bool:
        return self.kind in ("constant", "two-point", "rademacher")

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Support points and probabilities of a discrete law."""
        if self.kind == "constant":
            return np.array([1.0]), np.array([1.0])
        if self.kind == "rademacher":
            return np.array([-1.0, 1.0]), np.array([0.5, 0.5])
        if self.kind == "two-point":
            return np.asarray(self.values), np.asarray(self.probs)
        raise ValueError(f"{self.kind} law is not discrete")

    def cdf(self, t):
        """Distribution function, where available in closed form."""
        t = np.asarray(t, dtype=float)
        if self.kind == "normal":
            return stats.norm.cdf(t)
        if self.kind == "t":
            scale = math.sqrt((self.df - 2) / self.df) if self.df > 2 else 1.0
            return stats.t.cdf(t / scale, self.df)
        if self.kind == "exponential":
            return stats.expon.cdf(t + 1.0)
        if self.kind == "uniform":
            return stats.uniform.cdf(t, loc=-math.sqrt(3.0), scale=2 * math.sqrt(3.0))
        if self.is_discrete:
            pts, probs = self.atoms()
            return np.sum(probs * (t[..., None] >= pts), axis=-1)
        raise ValueError(f"no closed-form cdf for {self.kind}")

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        for name in ("df", "values", "probs", "ratio"):
            value = getattr(self, name)
            if value is not None:
                out[name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Law":
        data = dict(data)
        for name in ("values", "probs"):
            if data.get(name) is not None:
                data[name] = tuple(float(x) for x in data[name])
        unknown = set(data) - {"kind", "df", "values", "probs", "ratio"}
        if unknown:
            raise ValueError(f"unknown law fields {sorted(unknown)}")
        return cls(**data)


def _check_l(law: Law):
    if law.kind not in L_KINDS:
        raise ValueError(f"l law must be one of {L_KINDS}, got {law.kind!r}")
    if law.kind == "two-point" and not math.isclose(law.second_moment, 1.0, rel_tol=1e-9):
        raise ValueError(f"l law must have E[l^2] = 1, got {law.second_moment:.6g}")
    if law.min_abs <= 0:
        raise ValueError("l law must satisfy |l| >= c > 0")


def _check_v(law: Law):
    if law.kind not in V_KINDS:
        raise ValueError(f"v law must be one of {V_KINDS} (mean 0, variance 1), got {law.kind!r}")
    if law.kind == "t" and law.df <= 4:
        raise ValueError(f"v law t(df) needs df > 4 for a finite fourth moment, got {law.df}")


def _check_u(law: Law):
    if law.kind not in U_KINDS:
        raise ValueError(f"u law must be one of {U_KINDS}, got {law.kind!r}")


@dataclass(frozen=True)
class CovarianceSpec:
    """Recipe for the design covariance: identity, Toeplitz(rho) or explicit."""

    kind: str = "identity"
    rho: float | None = None
    matrix: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.kind == "toeplitz":
            if self.rho is None or not -1 < self.rho < 1:
                raise ValueError(f"toeplitz covariance needs -1 < rho < 1, got {self.rho}")
        elif self.kind == "explicit":
            if self.matrix is None:
                raise ValueError("explicit covariance needs a matrix")
        elif self.kind != "identity":
            raise ValueError(f"unknown covariance kind {self.kind!r}")

    def realize(self, p: int) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(p)
        if self.kind == "toeplitz":
            return linalg.toeplitz(self.rho ** np.arange(p))
        mat = np.asarray(self.matrix, dtype=float)
        if mat.shape != (p, p):
            raise ValueError(f"explicit covariance has shape {mat.shape}, expected ({p}, {p})")
        return mat

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        if self.rho is not None:
            out["rho"] = self.rho
        if self.matrix is not None:
            out["matrix"] = [list(row) for row in self.matrix]
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CovarianceSpec":
        data = dict(data)
        if data.get("matrix") is not None:
            data["matrix"] = tuple(tuple(float(x) for x in row) for row in data["matrix"])
        unknown = set(data) - {"kind", "rho", "matrix"}
        if unknown:
            raise ValueError(f"unknown covariance fields {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class DesignSpec:
    n: int
    p: int
    covariance: CovarianceSpec = field(default_factory=CovarianceSpec)
    l: Law = field(default_factory=lambda: Law("constant"))
    v: Law = field(default_factory=lambda: Law("normal"))
    u: Law = field(default_factory=lambda: Law("normal"))

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError(f"p must be a positive integer, got {self.p}")
        _check_l(self.l)
        _check_v(self.v)
        _check_u(self.u)

    @property
    def c(self) -> float:
        """Lower bound on ``|l|``."""
        return self.l.min_abs

    @property
    def kappa(self) -> float:
        return self.p / self.n

    def covariance_matrix(self) -> np.ndarray:
        return self.covariance.realize(self.p)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "p": self.p,
            "covariance": self.covariance.to_dict(),
            "l": self.l.to_dict(),
            "v": self.v.to_dict(),
            "u": self.u.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DesignSpec":
        unknown = set(data) - {"n", "p", "covariance", "l", "v", "u"}
        if unknown:
            raise ValueError(f"unknown design fields {sorted(unknown)}")
        missing = [k for k in ("n", "p") if k not in data]
        if missing:
            raise ValueError(f"design is missing required field {missing[0]!r}")
        kwargs: dict[str, Any] = {"n": data["n"], "p": data["p"]}
        if "covariance" in data:
            kwargs["covariance"] = CovarianceSpec.from_dict(data["covariance"])
        for name in ("l", "v", "u"):
            if name in data:
                kwargs[name] = Law.from_dict(data[name])
        return cls(**kwargs)


@dataclass
class ModelInstance:
    """One realized training sample together with the truth that produced it."""

    X: np.ndarray
    Y: np.ndarray
    u: np.ndarray
    beta: np.ndarray
    sigma: float
    sigma_sqrt: np.ndarray
    seed: tuple = ()


def sigma_sqrt(cov) -> np.ndarray:
    """Symmetric positive definite square root of a covariance matrix.

    ``cov`` is either a matrix or a ``(CovarianceSpec, p)`` pair. Raises
    ``ValueError`` reporting the smallest eigenvalue when the matrix is not
    positive definite (eigenvalues below ``1e-12 * lambda_max`` count as
    zero).
    """
    if isinstance(cov, tuple) and isinstance(cov[0], CovarianceSpec):
        cov = cov[0].realize(cov[1])
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise ValueError("covariance must be symmetric")
    cov = 0.5 * (cov + cov.T)
    w, Q = np.linalg.eigh(cov)
    if w[-1] <= 0 or w[0] <= 1e-12 * w[-1]:
        raise ValueError(f"covariance is not positive definite: smallest eigenvalue {w[0]:.6g}")
    root = (Q * np.sqrt(w)) @ Q.T
    return 0.5 * (root + root.T)


def _root_for(spec: DesignSpec, root: np.ndarray | None) -> np.ndarray | None:
    if root is not None:
        return root
    if spec.covariance.kind == "identity":
        return None
    return sigma_sqrt(spec.covariance_matrix())


def _rows(spec: DesignSpec, m: int, rng: np.random.Generator, root) -> np.ndarray:
    l = spec.l.sample(rng, m)
    V = spec.v.sample(rng, (m, spec.p))
    Z = l[:, None] * V
    return Z if root is None else Z @ root


def sample_design(spec: DesignSpec, rng: np.random.Generator,
                  root: np.ndarray | None = None) -> np.ndarray:
    """Draw the ``n x p`` design matrix. ``root`` caches ``sigma_sqrt``."""
    return _rows(spec, spec.n, rng, _root_for(spec, root))


def sample_responses(X, beta, sigma: float, u_law: Law, rng: np.random.Generator):
    """Return ``(Y, u)`` with ``Y = X beta + sigma u``."""
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if X.ndim != 2 or beta.shape != (X.shape[1],):
        raise ValueError(f"dimension mismatch: X {X.shape}, beta {beta.shape}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    u = u_law.sample(rng, X.shape[0])
    return X @ beta + sigma * u, u


def sample_prediction_pairs(spec: DesignSpec, beta, sigma: float, m: int,
                            rng: np.random.Generator, root: np.ndarray | None = None):
    """Draw ``m`` independent ``(x0, y0)`` pairs from the training law."""
    X0 = _rows(spec, m, rng, _root_for(spec, root))
    y0, _ = sample_responses(X0, beta, sigma, spec.u, rng)
    return X0, y0


def sample_prediction_pair(spec: DesignSpec, beta, sigma: float,
                           rng: np.random.Generator, root: np.ndarray | None = None):
    X0, y0 = sample_prediction_pairs(spec, beta, sigma, 1, rng, root)
    return X0[0], float(y0[0])


def draw_model(spec: DesignSpec, beta, sigma: float, rng: np.random.Generator,
               root: np.ndarray | None = None, seed: tuple = ()) -> ModelInstance:
    """Draw a full training sample."""
    identity = spec.covariance.kind == "identity"
    if root is None:
        root = np.eye(spec.p) if identity else sigma_sqrt(spec.covariance_matrix())
    X = sample_design(spec, rng, None if identity else root)
    Y, u = sample_responses(X, beta, sigma, spec.u, rng)
    return ModelInstance(X=X, Y=Y, u=u, beta=np.asarray(beta, dtype=float),
                         sigma=float(sigma), sigma_sqrt=root, seed=seed)
