"""Monte Carlo experiments for leave-one-out prediction intervals.

Each replication draws a training sample, fits every configured estimator,
builds its leave-one-out interval and estimates the conditional coverage
from fresh prediction draws. Replication ``r`` only ever reads the streams
``(seed, r, "train")`` and ``(seed, r, "test")``, so reports do not depend
on the number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import optimize, stats
from threadpoolctl import threadpool_limits

from .dgp import DesignSpec, Law, draw_model, sample_prediction_pairs, sigma_sqrt
from .estimators import EstimatorSpec, fit, fit_on_subset
from .intervals import SIDES, empirical_quantile, loo_residuals, quantile_offsets
from .rng import substream

BETA_KINDS = ("zero", "dense", "sparse")


@dataclass(frozen=True)
class BetaSpec:
    """True coefficient recipe.

    ``dense`` spreads the signal along ``S^{-1} 1``, ``sparse`` puts equal
    weight on the first ``s`` coordinates. In both cases ``signal`` is the
    value of ``||S beta||_2`` with ``S`` the covariance root.
    """

    kind: str = "zero"
    signal: float = 0.0
    s: int | None = None

    def __post_init__(self):
        if self.kind not in BETA_KINDS:
            raise ValueError(f"beta kind must be one of {BETA_KINDS}, got {self.kind!r}")
        if self.signal < 0:
            raise ValueError(f"beta signal must be non-negative, got {self.signal}")
        if self.kind == "sparse" and (self.s is None or self.s < 1):
            raise ValueError("sparse beta needs s >= 1")

    def realize(self, root: np.ndarray) -> np.ndarray:
        p = root.shape[0]
        if self.kind == "zero" or self.signal == 0:
            return np.zeros(p)
        if self.kind == "dense":
            direction = np.ones(p)
        else:
            if self.s > p:
                raise ValueError(f"sparse beta has s={self.s} > p={p}")
            b = np.zeros(p)
            b[: self.s] = 1.0
            return b * (self.signal / np.linalg.norm(root @ b))
        b = np.linalg.solve(root, direction)
        return b * (self.signal / np.linalg.norm(root @ b))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "signal": self.signal}
        if self.s is not None:
            out["s"] = self.s
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BetaSpec":
        unknown = set(data) - {"kind", "signal", "s"}
        if unknown:
            raise ValueError(f"unknown beta fields {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ExperimentConfig:
    design: DesignSpec
    estimators: tuple[EstimatorSpec, ...] = (EstimatorSpec("ols"),)
    beta: BetaSpec = field(default_factory=BetaSpec)
    sigma: float = 1.0
    alpha: float = 0.1
    replications: int = 100
    prediction_draws: int = 2000
    seed: int = 0
    delta: float = 2.0
    side: str = "two-sided"
    diagnostics: bool = True
    failure_budget: float = 0.05

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.replications < 1:
            raise ValueError(f"replications must be >= 1, got {self.replications}")
        if self.prediction_draws < 1:
            raise ValueError(f"prediction_draws must be >= 1, got {self.prediction_draws}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.delta <= 2:
            raise ValueError(f"delta must lie in (0, 2], got {self.delta}")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if not self.estimators:
            raise ValueError("at least one estimator is required")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if not 0 <= self.failure_budget <= 1:
            raise ValueError(f"failure_budget must lie in [0, 1], got {self.failure_budget}")


@dataclass(frozen=True)
class IntervalRule:
    """An interval builder bound to one training set.

    At a feature vector ``x0`` the interval is
    ``[x0'beta_hat + lower_offset, x0'beta_hat + upper_offset]``.
    """

    beta_hat: np.ndarray
    lower_offset: float
    upper_offset: float

    def covers(self, X0, y0) -> np.ndarray:
        err = np.asarray(y0) - np.asarray(X0) @ self.beta_hat
        return (err >= self.lower_offset) & (err <= self.upper_offset)


@dataclass
class Aggregate:
    value: float
    se: float


@dataclass
class ReplicationRecord:
    replication: int
    estimator: str
    coverage: float = math.nan
    length: float = math.nan
    tau: float = math.nan
    lp_norm: float = math.nan
    perturbation: float = math.nan
    iterations: int = 0
    failed: bool = False
    flags: str = ""


@dataclass
class SpectralRecord:
    replication: int
    trace_pinv: float
    trace_pinv2: float
    lambda_min: float


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    records: list[ReplicationRecord]
    spectral: list[SpectralRecord]
    aggregates: dict[str, dict[str, Aggregate]]
    failures: dict[str, int]

    def values(self, estimator: str, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records
                         if r.estimator == estimator and not r.failed])

    def aggregate(self, estimator: str, name: str) -> Aggregate:
        return self.aggregates[estimator][name]


# -- single-training-set quantities ---------------------------------------

def scaled_error_norm(beta_hat, beta, root, sigma: float, order: float = 2.0) -> float:
    """``||S (beta_hat - beta) / sigma||`` in the given ``l_order`` norm."""
    d = root @ (np.asarray(beta_hat) - np.asarray(beta)) / sigma
    return float(np.linalg.norm(d, ord=order))


def perturbation_norm(spec: EstimatorSpec, X, Y, root, sigma: float, full_fit=None) -> float:
    """Scaled distance between the full fit and the fit without the first row."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("perturbation norm needs n >= 2")
    full = full_fit if full_fit is not None else fit(spec, X, Y)
    warm = full.beta_hat if spec.iterative else None
    reduced = fit_on_subset(spec, X, Y, (0,), warm_start=warm)
    return scaled_error_norm(full.beta_hat, reduced.beta_hat, root, sigma)


def conditional_coverage(rule: IntervalRule, design: DesignSpec, beta, sigma: float, m: int,
                         rng: np.random.Generator, root: np.ndarray | None = None) -> float:
    """Fraction of ``m`` fresh ``(x0, y0)`` draws whose ``y0`` falls in the interval."""
    if root is not None and design.covariance.kind == "identity":
        root = None
    X0, y0 = sample_prediction_pairs(design, beta, sigma, m, rng, root)
    return float(np.mean(rule.covers(X0, y0)))


def spectral_diagnostics(X, m: int = 1) -> dict[str, float]:
    """``trace((X'X)^+)^m`` and the smallest eigenvalue of ``X'X / n``."""
    if m not in (1, 2):
        raise ValueError(f"m must be 1 or 2, got {m}")
    X = np.asarray(X, dtype=float)
    trace1, trace2, lam_min = _spectral_from_values(np.linalg.svd(X, compute_uv=False), *X.shape)
    return {"trace": trace1 if m == 1 else trace2, "lambda_min": lam_min}


def _spectral_from_values(s: np.ndarray, n: int, p: int) -> tuple[float, float, float]:
    tol = np.finfo(float).eps * max(n, p) * (s[0] if s.size else 0.0)
    nz = s[s > tol]
    eig = nz ** 2
    lam_min = float(s[-1] ** 2 / n) if p <= n else 0.0
    return float(np.sum(1 / eig)), float(np.sum(1 / eig ** 2)), lam_min


# -- replications -----------------------------------------------------------

def _design_root(design: DesignSpec) -> np.ndarray:
    if design.covariance.kind == "identity":
        return np.eye(design.p)
    return sigma_sqrt(design.covariance_matrix())


def simulate_training(config: ExperimentConfig, replication: int, root=None):
    """Training sample of one replication, drawn from its ``train`` stream."""
    root = _design_root(config.design) if root is None else root
    beta = config.beta.realize(root)
    rng = substream(config.seed, replication, "train")
    return draw_model(config.design, beta, config.sigma, rng, root,
                      seed=(config.seed, replication, "train"))


def run_replication(config: ExperimentConfig, replication: int):
    """Records for every estimator on one training sample, plus spectral diagnostics."""
    root = _design_root(config.design)
    model = simulate_training(config, replication, root)
    records = []
    for spec in config.estimators:
        rec = ReplicationRecord(replication, spec.label)
        try:
            full = fit(spec, model.X, model.Y)
            rec.iterations = full.iterations
            if not full.converged:
                rec.failed = True
                rec.flags = "nonconverged"
                records.append(rec)
                continue
            loo = loo_residuals(spec, model.X, model.Y, full_fit=full)
            lo, hi = quantile_offsets(loo.values, config.alpha, config.side)
            rule = IntervalRule(full.beta_hat, lo, hi)
            rng = substream(config.seed, replication, "test")
            rec.coverage = conditional_coverage(rule, config.design, model.beta, config.sigma,
                                                config.prediction_draws, rng, root)
            rec.length = (hi - lo) / config.sigma
            rec.tau = scaled_error_norm(full.beta_hat, model.beta, root, config.sigma)
            rec.lp_norm = scaled_error_norm(full.beta_hat, model.beta, root, config.sigma,
                                            2 + config.delta)
            if config.diagnostics:
                rec.perturbation = perturbation_norm(spec, model.X, model.Y, root,
                                                     config.sigma, full)
            flags = [loo.method]
            flags.extend(sorted(k for k, v in full.flags.items() if v is True))
            rec.flags = ";".join(flags)
        except Exception as exc:  # recorded, counted against the failure budget
            rec.failed = True
            rec.flags = f"error:{type(exc).__name__}"
        records.append(rec)
    spectral = None
    if config.diagnostics:
        t1, t2, lam = _spectral_from_values(np.linalg.svd(model.X, compute_uv=False),
                                            *model.X.shape)
        spectral = SpectralRecord(replication, t1, t2, lam)
    return records, spectral


def _run_chunk(config: ExperimentConfig, indices: Sequence[int]):
    with threadpool_limits(1):
        return [run_replication(config, r) for r in indices]


def run_replications(config: ExperimentConfig, jobs: int = 1):
    """Run all replications; output order is by replication index."""
    indices = list(range(config.replications))
    if jobs <= 1:
        results = _run_chunk(config, indices)
    else:
        chunks = [indices[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_run_chunk, [config] * len(chunks), chunks))
        by_index = {}
        for chunk, part in zip(chunks, parts):
            by_index.update(zip(chunk, part))
        results = [by_index[r] for r in indices]
    records = [rec for recs, _ in results for rec in recs]
    spectral = [sp for _, sp in results if sp is not None]
    return records, spectral


def mean_se(values) -> Aggregate:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return Aggregate(math.nan, math.nan)
    se = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else math.nan
    return Aggregate(float(np.mean(values)), se)


def _aggregate(config: ExperimentConfig, records: list[ReplicationRecord]):
    aggregates: dict[str, dict[str, Aggregate]] = {}
    failures: dict[str, int] = {}
    target = 1 - config.alpha
    for spec in config.estimators:
        mine = [r for r in records if r.estimator == spec.label]
        ok = [r for r in mine if not r.failed]
        failures[spec.label] = len(mine) - len(ok)
        cov = np.array([r.coverage for r in ok])
        agg = {
            "honesty_gap": mean_se(np.abs(cov - target)),
            "coverage": mean_se(cov),
            "length": mean_se([r.length for r in ok]),
            "tau": mean_se([r.tau for r in ok]),
            "lp_norm": mean_se([r.lp_norm for r in ok]),
        }
        if config.diagnostics:
            agg["perturbation"] = mean_se([r.perturbation for r in ok])
        aggregates[spec.label] = agg
    return aggregates, failures


def honesty_gap(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    """Mean absolute deviation of conditional coverage from ``1 - alpha``.

    Failed replications (exceptions or non-convergence) are flagged, counted
    in ``report.failures`` and left out of the aggregates.
    """
    records, spectral = run_replications(config, jobs)
    aggregates, failures = _aggregate(config, records)
    return ExperimentReport(config, records, spectral, aggregates, failures)


# -- estimator error norms ----------------------------------------------------

@dataclass
class TauEstimate:
    values: np.ndarray
    mean: float
    se: float
    iqr: float
    theory: float | None


def ols_tau_limit(kappa: float) -> float:
    """Limit of the scaled OLS prediction error norm when ``|l| = 1``."""
    if not 0 <= kappa < 1:
        raise ValueError(f"kappa must lie in [0, 1), got {kappa}")
    return math.sqrt(kappa / (1 - kappa))


def _fit_norms(spec: EstimatorSpec, config: ExperimentConfig, replications: int, order: float):
    root = _design_root(config.design)
    out = np.empty(replications)
    with threadpool_limits(1):
        for r in range(replications):
            model = simulate_training(config, r, root)
            res = fit(spec, model.X, model.Y)
            out[r] = scaled_error_norm(res.beta_hat, model.beta, root, config.sigma, order)
    return out


def estimate_tau(spec: EstimatorSpec, config: ExperimentConfig,
                 replications: int | None = None) -> TauEstimate:
    """Per-replication ``||S (beta_hat - beta) / sigma||_2`` and its summary.

    ``theory`` holds the OLS limit when it is known (OLS with ``|l| = 1``),
    otherwise ``None``.
    """
    R = config.replications if replications is None else replications
    values = _fit_norms(spec, config, R, 2.0)
    agg = mean_se(values)
    q75, q25 = np.percentile(values, [75, 25])
    theory = None
    if spec.kind == "ols" and config.design.l.kind == "constant" and config.design.kappa < 1:
        theory = ols_tau_limit(config.design.kappa)
    return TauEstimate(values, agg.value, agg.se, float(q75 - q25), theory)


def lp_norm_diagnostic(spec: EstimatorSpec, config: ExperimentConfig, delta: float | None = None,
                       replications: int | None = None) -> np.ndarray:
    """Per-replication ``||S (beta_hat - beta) / sigma||_{2 + delta}``."""
    delta = config.delta if delta is None else delta
    if not 0 < delta <= 2:
        raise ValueError(f"delta must lie in (0, 2], got {delta}")
    R = config.replications if replications is None else replications
    return _fit_norms(spec, config, R, 2.0 + delta)


def perturbation_norms(spec: EstimatorSpec, config: ExperimentConfig,
                       replications: int | None = None) -> np.ndarray:
    """``perturbation_norm`` over independent training samples."""
    R = config.replications if replications is None else replications
    root = _design_root(config.design)
    out = np.empty(R)
    with threadpool_limits(1):
        for r in range(R):
            model = simulate_training(config, r, root)
            out[r] = perturbation_norm(spec, model.X, model.Y, root, config.sigma)
    return out


# -- asymptotic interval length -----------------------------------------------

def _mixture_components(tau: float, l_law: Law, u_law: Law):
    """``(weights, means, sds)`` of ``l N tau + u`` as a normal mixture, if it is one."""
    ls, lp = l_law.atoms()
    if u_law.kind == "normal":
        return lp, np.zeros_like(ls), np.sqrt((ls * tau) ** 2 + 1.0)
    us, up = u_law.atoms()
    w = np.outer(lp, up).ravel()
    means = np.tile(us, ls.size)
    sds = np.repeat(np.abs(ls) * tau, us.size)
    return w, means, sds


def _has_exact_length(tau: float, l_law: Law, u_law: Law) -> bool:
    if not l_law.is_discrete:
        return False
    if u_law.kind == "normal":
        return True
    return u_law.is_discrete and tau > 0


def _mixture_quantile(t: float, w, means, sds) -> float:
    def cdf(x):
        return float(np.sum(w * stats.norm.cdf((x - means) / sds))) - t

    lo = float(np.min(means - 40 * sds)) - 1.0
    hi = float(np.max(means + 40 * sds)) + 1.0
    return optimize.brentq(cdf, lo, hi, xtol=1e-13, rtol=1e-13)


def _discrete_quantile(t: float, law: Law) -> float:
    pts, probs = law.atoms()
    order = np.argsort(pts)
    pts, cum = pts[order], np.cumsum(probs[order])
    idx = int(np.searchsorted(cum, t - 1e-15))
    return float(pts[min(idx, pts.size - 1)])


def _mc_length(tau, l_law, u_law, alpha, m, rng, batches: int = 20):
    draws = l_law.sample(rng, m) * rng.standard_normal(m) * tau + u_law.sample(rng, m)

    def iqr(x):
        return empirical_quantile(x, 1 - alpha / 2) - empirical_quantile(x, alpha / 2)

    value = iqr(draws)
    parts = [iqr(chunk) for chunk in np.array_split(draws, batches)]
    return value, float(np.std(parts, ddof=1) / math.sqrt(batches))


def _length_with_se(tau, l_law, u_law, alpha, m, rng, method):
    if method not in ("auto", "exact", "monte-carlo"):
        raise ValueError(f"unknown method {method!r}")
    if method != "monte-carlo":
        if l_law.kind == "constant" and u_law.kind == "normal":
            return 2 * float(stats.norm.ppf(1 - alpha / 2)) * math.sqrt(1 + tau * tau), 0.0
        if tau == 0 and u_law.is_discrete:
            return _discrete_quantile(1 - alpha / 2, u_law) - _discrete_quantile(alpha / 2, u_law), 0.0
        if _has_exact_length(tau, l_law, u_law):
            comps = _mixture_components(tau, l_law, u_law)
            return (_mixture_quantile(1 - alpha / 2, *comps)
                    - _mixture_quantile(alpha / 2, *comps)), 0.0
        if method == "exact":
            raise ValueError(f"no exact length for l={l_law.kind}, u={u_law.kind}")
    rng = np.random.default_rng() if rng is None else rng
    return _mc_length(tau, l_law, u_law, alpha, m, rng)


def asymptotic_length_oracle(tau: float, l_law: Law, u_law: Law, alpha: float,
                             m: int = 1_000_000, rng: np.random.Generator | None = None,
                             method: str = "auto") -> float:
    """Inter-quantile range ``q(1 - alpha/2) - q(alpha/2)`` of ``l N tau + u``.

    With ``method="auto"`` a closed form is used for ``l = 1`` and normal
    ``u``, normal-mixture quantiles when ``l`` is discrete and ``u`` is
    normal or discrete, and ``m`` Monte Carlo draws otherwise.
    """
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return float(_length_with_se(tau, l_law, u_law, alpha, m, rng, method)[0])


@dataclass
class LengthComparison:
    estimator: str
    mean_length: float
    length_se: float
    mean_tau: float
    oracle: float
    relative_gap: float


def length_convergence(config: ExperimentConfig | ExperimentReport, jobs: int = 1,
                       m: int = 1_000_000) -> list[LengthComparison]:
    """Compare the mean scaled length with the asymptotic length at the mean ``tau``."""
    report = config if isinstance(config, ExperimentReport) else honesty_gap(config, jobs)
    cfg = report.config
    out = []
    for spec in cfg.estimators:
        length = report.aggregate(spec.label, "length")
        tau = report.aggregate(spec.label, "tau").value
        rng = substream(cfg.seed, 0, "length-oracle")
        oracle = asymptotic_length_oracle(tau, cfg.design.l, cfg.design.u, cfg.alpha, m, rng)
        out.append(LengthComparison(spec.label, length.value, length.se, tau, oracle,
                                    float((length.value - oracle) / oracle)))
    return out


@dataclass
class MonotonicityScan:
    taus: np.ndarray
    lengths: np.ndarray
    ses: np.ndarray
    decreasing: list[tuple[int, int]]

    @property
    def monotone(self) -> bool:
        return not self.decreasing


def length_monotonicity_scan(l_law: Law, u_law: Law, alpha: float, tau_grid,
                             m: int = 200_000, rng: np.random.Generator | None = None,
                             method: str = "auto") -> MonotonicityScan:
    """Evaluate the asymptotic length on ``tau_grid`` and flag decreases.

    A drop between adjacent grid points is flagged only when it exceeds
    three combined Monte Carlo standard errors (or ``1e-9`` for exact
    evaluations).
    """
    taus = np.asarray(sorted(tau_grid), dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng
    pairs = [_length_with_se(t, l_law, u_law, alpha, m, rng, method) for t in taus]
    lengths = np.array([v for v, _ in pairs])
    ses = np.array([s for _, s in pairs])
    decreasing = []
    for i in range(taus.size - 1):
        drop = lengths[i] - lengths[i + 1]
        noise = 3 * math.hypot(ses[i], ses[i + 1])
        if drop > max(noise, 1e-9):
            decreasing.append((i, i + 1))
    return MonotonicityScan(taus, lengths, ses, decreasing)


# -- normal approximation of projections ------------------------------------

def projection_normality_ks(b, v_law: Law, m: int, rng: np.random.Generator,
                            chunk: int = 5000) -> float:
    """Kolmogorov-Smirnov distance between ``b'v / ||b||_2`` and ``N(0, 1)``."""
    b = np.asarray(b, dtype=float)
    norm = np.linalg.norm(b)
    if norm == 0:
        raise ValueError("b must be non-zero")
    b = b / norm
    z = np.empty(m)
    for start in range(0, m, chunk):
        stop = min(start + chunk, m)
        z[start:stop] = v_law.sample(rng, (stop - start, b.size)) @ b
    return float(stats.kstest(z, "norm").statistic)
