import math

import numpy as np
import pytest
from scipy import stats

from loopi.dgp import CovarianceSpec, DesignSpec, Law
from loopi.estimators import EstimatorSpec
from loopi.rng import substream
from loopi.validation import (
    BetaSpec,
    ExperimentConfig,
    IntervalRule,
    asymptotic_length_oracle,
    conditional_coverage,
    estimate_tau,
    honesty_gap,
    length_convergence,
    length_monotonicity_scan,
    lp_norm_diagnostic,
    perturbation_norm,
    projection_normality_ks,
    scaled_error_norm,
    spectral_diagnostics,
)

Z975 = stats.norm.ppf(0.975)


def small_config(**kw):
    base = dict(design=DesignSpec(60, 10), alpha=0.1, replications=6, prediction_draws=300, seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


# -- configuration -----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(replications=0), dict(prediction_draws=0),
                                dict(sigma=0.0), dict(delta=3.0), dict(side="both"), dict(estimators=())])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small_config(**kw)


@pytest.mark.parametrize("beta", [BetaSpec("dense", 10.0), BetaSpec("sparse", 1.0, s=3)])
def test_beta_signal_is_scaled(beta):
    root = np.linalg.cholesky(CovarianceSpec("toeplitz", rho=0.5).realize(8))
    root = (root @ root.T)  # any SPD matrix works as a root here
    b = beta.realize(root)
    assert np.linalg.norm(root @ b) == pytest.approx(beta.signal)
    if beta.kind == "sparse":
        assert np.count_nonzero(b) == 3


# -- conditional coverage -------------------------------------------------------------------

def test_coverage_of_whole_line():
    rule = IntervalRule(np.zeros(3), -math.inf, math.inf)
    assert conditional_coverage(rule, DesignSpec(5, 3), np.ones(3), 1.0, 500, substream(1, "t")) == 1.0


def test_coverage_of_point_interval():
    rule = IntervalRule(np.ones(3), 0.0, 0.0)
    assert conditional_coverage(rule, DesignSpec(5, 3), np.ones(3), 1.0, 500, substream(1, "t")) == 0.0


def test_coverage_with_true_beta_normal_oracle():
    beta = np.array([1.0, -2.0, 0.5])
    rule = IntervalRule(beta, -Z975 * 2.0, Z975 * 2.0)
    cov = conditional_coverage(rule, DesignSpec(5, 3), beta, 2.0, 200_000, substream(2, "t"))
    assert abs(cov - 0.95) < 4 * math.sqrt(0.95 * 0.05 / 200_000)


def test_coverage_is_monotone_in_width():
    spec = DesignSpec(5, 4, CovarianceSpec("toeplitz", rho=0.3), u=Law("exponential"))
    beta = np.ones(4)
    covs = [conditional_coverage(IntervalRule(beta * 0.9, -w, w), spec, beta, 1.0, 2000,
                                 substream(4, "t")) for w in np.linspace(0, 4, 9)]
    assert np.all(np.diff(covs) >= 0)


# -- honesty gap ---------------------------------------------------------------------------

def test_honesty_gap_report_shape():
    cfg = small_config(estimators=(EstimatorSpec("ols"), EstimatorSpec("ridge", lam=2.0)))
    rep = honesty_gap(cfg)
    assert len(rep.records) == 12
    for label in ("ols", "ridge(lambda=2)"):
        cov = rep.values(label, "coverage")
        assert np.all((cov >= 0) & (cov <= 1))
        gap = rep.aggregate(label, "honesty_gap")
        assert 0 <= gap.value <= max(cfg.alpha, 1 - cfg.alpha)
        assert gap.value == pytest.approx(np.mean(np.abs(cov - 0.9)))
        assert gap.se > 0
    assert len(rep.spectral) == 6


def test_honesty_gap_oracle_interval_floor():
    # an oracle rule with the exact N(0,1) error quantiles and beta_hat = beta
    gaps = []
    for r in range(30):
        rule = IntervalRule(np.zeros(5), stats.norm.ppf(0.05), stats.norm.ppf(0.95))
        c = conditional_coverage(rule, DesignSpec(5, 5), np.zeros(5), 1.0, 2000, substream(7, r, "t"))
        gaps.append(abs(c - 0.9))
    # E|c - 0.9| = sqrt(2/pi) * sqrt(0.09/2000) ~ 0.0054
    assert np.mean(gaps) < 3 * math.sqrt(2 / math.pi) * math.sqrt(0.09 / 2000)


def test_honesty_gap_median_band():
    rep = honesty_gap(small_config(alpha=0.5, design=DesignSpec(200, 10), replications=10,
                                   prediction_draws=2000))
    assert abs(rep.aggregate("ols", "coverage").value - 0.5) < 0.05


def test_honesty_gap_is_deterministic_across_workers():
    cfg = small_config(estimators=(EstimatorSpec("ols"), EstimatorSpec("huber", k=1.0)))
    a = honesty_gap(cfg, jobs=1)
    b = honesty_gap(cfg, jobs=3)
    assert a.records == b.records
    assert a.spectral == b.spectral


def test_failures_are_counted_and_excluded():
    cfg = small_config(estimators=(EstimatorSpec("ols"), EstimatorSpec("lasso", lam=1e-4, max_iter=1)))
    rep = honesty_gap(cfg)
    assert rep.failures["lasso(lambda=0.0001)"] == cfg.replications
    assert math.isnan(rep.aggregate("lasso(lambda=0.0001)", "coverage").value)
    assert rep.failures["ols"] == 0


def test_all_estimator_kinds_run():
    cfg = small_config(estimators=(EstimatorSpec("ols"), EstimatorSpec("ridge", lam=1.0),
                                   EstimatorSpec("lasso", lam=0.05), EstimatorSpec("huber", k=1.345),
                                   EstimatorSpec("james-stein", c=0.5)),
                       design=DesignSpec(40, 8, u=Law("t", df=3)), replications=2, beta=BetaSpec("dense", 2.0))
    rep = honesty_gap(cfg)
    assert sum(rep.failures.values()) == 0
    assert all(np.isfinite(r.coverage) and np.isfinite(r.tau) for r in rep.records)


# -- norms ---------------------------------------------------------------------------------

def test_estimate_tau_kappa_point_two():
    cfg = small_config(design=DesignSpec(500, 100), replications=20)
    est = estimate_tau(EstimatorSpec("ols"), cfg)
    assert est.theory == pytest.approx(0.5)
    assert abs(est.mean - 0.5) < 0.05
    assert est.iqr >= 0


def test_estimate_tau_consistency_regime():
    cfg = small_config(design=DesignSpec(4000, 3), replications=10)
    assert estimate_tau(EstimatorSpec("ols"), cfg).mean < 0.05


def test_lp_norm_below_l2_norm(rng):
    b = rng.standard_normal(50)
    root = np.eye(50)
    assert scaled_error_norm(b, 0 * b, root, 1.0, 4) <= scaled_error_norm(b, 0 * b, root, 1.0, 2)
    assert scaled_error_norm(b, b, root, 1.0, 4) == 0.0


def test_lp_norm_diagnostic_values():
    cfg = small_config(design=DesignSpec(200, 100), replications=5)
    l4 = lp_norm_diagnostic(EstimatorSpec("ols"), cfg, 2.0)
    tau = estimate_tau(EstimatorSpec("ols"), cfg).values
    assert np.all(l4 <= tau)
    with pytest.raises(ValueError):
        lp_norm_diagnostic(EstimatorSpec("ols"), cfg, 3.0)


def test_perturbation_norm_duplicated_row_interpolating(rng):
    X = rng.standard_normal((9, 12))
    X = np.vstack([X[:1], X])
    Y = rng.standard_normal(10)
    Y[0] = Y[1]
    assert perturbation_norm(EstimatorSpec("ols"), X, Y, np.eye(12), 1.0) < 1e-10


def test_perturbation_norm_duplicated_row_noiseless(rng):
    X = rng.standard_normal((30, 5))
    X = np.vstack([X[:1], X])
    Y = X @ rng.standard_normal(5)
    assert perturbation_norm(EstimatorSpec("ols"), X, Y, np.eye(5), 1.0) < 1e-10


def test_perturbation_norm_large_ridge(rng):
    X = rng.standard_normal((30, 5))
    Y = rng.standard_normal(30)
    small = perturbation_norm(EstimatorSpec("ridge", lam=1.0), X, Y, np.eye(5), 1.0)
    large = perturbation_norm(EstimatorSpec("ridge", lam=1e9), X, Y, np.eye(5), 1.0)
    assert large < 1e-8 < small


# -- asymptotic length ----------------------------------------------------------------------

def test_length_oracle_tau_zero_normal():
    assert asymptotic_length_oracle(0.0, Law("constant"), Law("normal"), 0.05) == pytest.approx(3.919928, abs=1e-6)


def test_length_oracle_tau_one_normal():
    assert asymptotic_length_oracle(1.0, Law("constant"), Law("normal"), 0.05) == pytest.approx(5.543615, abs=1e-6)


def test_length_oracle_two_point_tau_zero():
    for alpha in (0.05, 0.3, 0.9):
        assert asymptotic_length_oracle(0.0, Law("constant"), Law("two-point"), alpha) == 2.0
        mc = asymptotic_length_oracle(0.0, Law("constant"), Law("two-point"), alpha, m=20_001,
                                      rng=substream(1, "mc"), method="monte-carlo")
        assert mc == 2.0


def test_length_oracle_monte_carlo_agrees_with_closed_form():
    mc = asymptotic_length_oracle(1.0, Law("constant"), Law("normal"), 0.05, m=400_000,
                                  rng=substream(2, "mc"), method="monte-carlo")
    assert mc == pytest.approx(5.543615, rel=0.01)


def test_length_oracle_mixture_agrees_with_monte_carlo():
    l = Law("two-point", values=(math.sqrt(0.5), math.sqrt(1.5)))
    for u in (Law("normal"), Law("two-point")):
        exact = asymptotic_length_oracle(0.7, l, u, 0.1)
        mc = asymptotic_length_oracle(0.7, l, u, 0.1, m=400_000, rng=substream(3, "mc"),
                                      method="monte-carlo")
        assert exact == pytest.approx(mc, rel=0.01)


def test_length_oracle_general_law_uses_monte_carlo():
    val = asymptotic_length_oracle(0.5, Law("scaled-uniform", ratio=0.5), Law("exponential"), 0.1,
                                   m=100_000, rng=substream(4, "mc"))
    assert 2 < val < 6
    with pytest.raises(ValueError):
        asymptotic_length_oracle(0.5, Law("constant"), Law("exponential"), 0.1, method="exact")


def test_scan_normal_is_monotone():
    scan = length_monotonicity_scan(Law("constant"), Law("normal"), 0.05, np.arange(0, 2.01, 0.25))
    assert scan.monotone
    assert np.all(np.diff(scan.lengths) > 0)


def test_scan_two_point_is_not_monotone():
    grid = np.arange(0, 2.01, 0.25)
    scan = length_monotonicity_scan(Law("constant"), Law("two-point"), 0.9, grid)
    assert not scan.monotone
    assert (0, 1) in scan.decreasing
    # independent check by Monte Carlo with the significance rule
    mc = length_monotonicity_scan(Law("constant"), Law("two-point"), 0.9, [0.0, 0.25], m=200_000,
                                  rng=substream(5, "mc"), method="monte-carlo")
    assert mc.decreasing == [(0, 1)]


def test_scan_singleton():
    scan = length_monotonicity_scan(Law("constant"), Law("two-point"), 0.9, [0.5])
    assert scan.monotone


# -- normality of projections ------------------------------------------------------------

def test_ks_normal_v_floor():
    d = projection_normality_ks(np.arange(1.0, 21.0), Law("normal"), 20_000, substream(1, "ks"))
    assert d < 1.63 / math.sqrt(20_000)  # 99% KS critical value


def test_ks_single_coordinate_rademacher_is_analytic():
    d = projection_normality_ks(np.eye(50)[0], Law("rademacher"), 20_000, substream(2, "ks"))
    # sup |F - Phi| for a fair +-1 law is attained at +-1: Phi(1) - 1/2
    assert d == pytest.approx(stats.norm.cdf(1) - 0.5, abs=0.01)


def test_ks_spread_rademacher_is_nearly_normal():
    d = projection_normality_ks(np.ones(400) / 20, Law("rademacher"), 20_000, substream(3, "ks"))
    assert d < 0.05


def test_ks_rejects_zero_vector():
    with pytest.raises(ValueError):
        projection_normality_ks(np.zeros(3), Law("normal"), 10, substream(4, "ks"))


# -- spectral diagnostics ---------------------------------------------------------------------

def test_spectral_matches_direct_computation(rng):
    X = rng.standard_normal((30, 8))
    G = X.T @ X
    d1 = spectral_diagnostics(X, 1)
    d2 = spectral_diagnostics(X, 2)
    assert d1["trace"] == pytest.approx(np.trace(np.linalg.inv(G)), rel=1e-10)
    assert d2["trace"] == pytest.approx(np.trace(np.linalg.matrix_power(np.linalg.inv(G), 2)), rel=1e-10)
    assert d1["lambda_min"] == pytest.approx(np.linalg.eigvalsh(G / 30).min(), rel=1e-10)


def test_spectral_wide_design_uses_pseudo_inverse(rng):
    X = rng.standard_normal((6, 10))
    d = spectral_diagnostics(X, 1)
    assert d["trace"] == pytest.approx(np.trace(np.linalg.pinv(X.T @ X)), rel=1e-8)
    assert d["lambda_min"] == 0.0
    with pytest.raises(ValueError):
        spectral_diagnostics(X, 3)


# -- length convergence ----------------------------------------------------------------------

def test_length_scale_invariance():
    a = honesty_gap(small_config(sigma=1.0))
    b = honesty_gap(small_config(sigma=7.0))
    np.testing.assert_allclose(a.values("ols", "length"), b.values("ols", "length"), rtol=1e-10)
    np.testing.assert_allclose(a.values("ols", "coverage"), b.values("ols", "coverage"))


def test_length_convergence_reports_oracle():
    cfg = small_config(design=DesignSpec(400, 20), alpha=0.05, replications=5)
    (cmp,) = length_convergence(cfg)
    expected = 2 * Z975 * math.sqrt(1 + cmp.mean_tau ** 2)
    assert cmp.oracle == pytest.approx(expected)
    assert cmp.relative_gap == pytest.approx((cmp.mean_length - expected) / expected)
