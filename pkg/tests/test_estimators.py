import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopi.estimators import (
    EstimatorSpec,
    fit,
    fit_huber,
    fit_james_stein,
    fit_lasso,
    fit_ols,
    fit_on_subset,
    fit_ridge,
    huber_objective,
    lasso_kkt_residual,
    soft_threshold,
)

ALL_SPECS = [
    EstimatorSpec("ols"),
    EstimatorSpec("ridge", lam=0.7),
    EstimatorSpec("lasso", lam=0.05),
    EstimatorSpec("huber", k=1.0),
    EstimatorSpec("james-stein", c=0.5),
]


def regression(rng, n=60, p=8, noise=1.0):
    X = rng.standard_normal((n, p))
    beta = rng.standard_normal(p)
    return X, X @ beta + noise * rng.standard_normal(n), beta


# -- spec validation -----------------------------------------------------------

@pytest.mark.parametrize("kind,name", [("ridge", "lambda"), ("lasso", "lambda"),
                                       ("huber", "k"), ("james-stein", "c")])
def test_missing_hyperparameter_is_named(kind, name):
    with pytest.raises(ValueError, match=f"'{name}'"):
        EstimatorSpec(kind)


def test_non_positive_hyperparameter():
    with pytest.raises(ValueError):
        EstimatorSpec("ridge", lam=0.0)
    with pytest.raises(ValueError, match="unknown"):
        EstimatorSpec("elastic-net")


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind)
def test_spec_round_trip(spec):
    assert EstimatorSpec.from_dict(spec.to_dict()) == spec


# -- OLS -------------------------------------------------------------------------

def test_ols_mean_of_two_points(toy):
    np.testing.assert_allclose(fit_ols(*toy).beta_hat, [1.0])


def test_ols_interpolates(rng):
    X = rng.standard_normal((30, 6))
    beta = rng.standard_normal(6)
    assert np.abs(fit_ols(X, X @ beta).beta_hat - beta).max() < 1e-10


def test_ols_minimum_norm_matches_svd_oracle(rng):
    X = rng.standard_normal((5, 8))
    Y = rng.standard_normal(5)
    # oracle: minimum-norm solution X'(XX')^{-1}Y, valid since X has full row rank
    oracle = X.T @ np.linalg.solve(X @ X.T, Y)
    assert np.abs(fit_ols(X, Y).beta_hat - oracle).max() < 1e-8
    assert np.abs(fit_ols(X, Y).beta_hat - np.linalg.pinv(X) @ Y).max() < 1e-8


def test_ols_rank_deficient_columns(rng):
    Z = rng.standard_normal((20, 3))
    X = np.column_stack([Z, Z[:, 0]])
    Y = rng.standard_normal(20)
    res = fit_ols(X, Y)
    assert res.flags["rank"] == 3
    assert np.abs(res.beta_hat - np.linalg.pinv(X) @ Y).max() < 1e-10


def test_ols_equivariance(rng):
    X, Y, _ = regression(rng)
    shift = rng.standard_normal(X.shape[1])
    b0 = fit_ols(X, Y).beta_hat
    b1 = fit_ols(X, Y + X @ shift).beta_hat
    assert np.abs(b1 - (b0 + shift)).max() < 1e-10


# -- ridge -------------------------------------------------------------------------

def test_ridge_hand_computation(toy):
    np.testing.assert_allclose(fit_ridge(*toy, 2.0).beta_hat, [0.5])


def test_ridge_shrinks_monotonically(rng):
    X, Y, _ = regression(rng)
    norms = [np.linalg.norm(fit_ridge(X, Y, lam).beta_hat) for lam in np.logspace(-3, 6, 25)]
    assert np.all(np.diff(norms) < 0)
    assert norms[-1] < 1e-3


def test_ridge_small_lambda_matches_ols(rng):
    X, Y, _ = regression(rng)
    lam = 1e-10 * np.trace(X.T @ X) / X.shape[1]
    assert np.abs(fit_ridge(X, Y, lam).beta_hat - fit_ols(X, Y).beta_hat).max() < 1e-6


def test_ridge_dual_matches_primal(rng):
    X = rng.standard_normal((10, 25))
    Y = rng.standard_normal(10)
    primal = np.linalg.solve(X.T @ X + 0.3 * np.eye(25), X.T @ Y)
    assert np.abs(fit_ridge(X, Y, 0.3).beta_hat - primal).max() < 1e-10


# -- lasso -------------------------------------------------------------------------

def test_lasso_zero_above_threshold(rng):
    X, Y, _ = regression(rng)
    lam_max = np.max(np.abs(X.T @ Y)) / len(Y)
    res = fit_lasso(X, Y, lam_max * 1.0001)
    assert np.all(res.beta_hat == 0)
    assert np.any(fit_lasso(X, Y, lam_max * 0.99).beta_hat != 0)


def test_lasso_orthogonal_design_soft_thresholds(rng):
    n, p = 40, 6
    Q, _ = np.linalg.qr(rng.standard_normal((n, p)))
    X = np.sqrt(n) * Q
    Y = X @ np.array([2.0, -1.0, 0.3, 0.0, 0.05, -0.6]) + 0.1 * rng.standard_normal(n)
    lam = 0.25
    expected = soft_threshold(X.T @ Y / n, lam)
    assert np.abs(fit_lasso(X, Y, lam).beta_hat - expected).max() < 1e-8


def test_lasso_small_lambda_matches_ols(rng):
    X, Y, _ = regression(rng, n=80, p=10)
    assert np.abs(fit_lasso(X, Y, 1e-7).beta_hat - fit_ols(X, Y).beta_hat).max() < 1e-4


def test_lasso_kkt_at_convergence(rng):
    X, Y, _ = regression(rng, n=50, p=30)
    res = fit_lasso(X, Y, 0.1)
    assert res.converged
    assert res.kkt_residual <= 1e-6
    assert lasso_kkt_residual(X, Y, res.beta_hat, 0.1) == res.kkt_residual


def test_lasso_nonconvergence_is_flagged(rng):
    X, Y, _ = regression(rng, n=50, p=30)
    res = fit_lasso(X, Y, 0.01, max_iter=2)
    assert not res.converged and res.iterations == 2


def test_lasso_warm_start_reaches_same_point(rng):
    X, Y, _ = regression(rng, n=50, p=20)
    cold = fit_lasso(X, Y, 0.05)
    warm = fit_lasso(X[1:], Y[1:], 0.05, warm_start=cold.beta_hat)
    ref = fit_lasso(X[1:], Y[1:], 0.05)
    assert np.abs(warm.beta_hat - ref.beta_hat).max() < 1e-6


# -- huber -------------------------------------------------------------------------

def test_huber_quadratic_regime_is_ols(rng):
    X, Y, _ = regression(rng, noise=0.1)
    ols = fit_ols(X, Y).beta_hat
    k = 10 * np.abs(Y - X @ ols).max()
    res = fit_huber(X, Y, k)
    assert np.abs(res.beta_hat - ols).max() < 1e-8
    assert res.converged


def test_huber_small_k_gives_median(rng):
    Y = rng.standard_normal(11) + rng.standard_exponential(11)
    res = fit_huber(np.ones((11, 1)), Y, 1e-7)
    assert abs(res.beta_hat[0] - np.median(Y)) < 1e-6


def test_huber_local_optimality(rng):
    X, Y, _ = regression(rng)
    Y[:5] += 15.0
    k = 1.0
    res = fit_huber(X, Y, k)
    best = huber_objective(X, Y, res.beta_hat, k)
    assert best <= huber_objective(X, Y, fit_ols(X, Y).beta_hat, k)
    for _ in range(50):
        d = rng.standard_normal(X.shape[1])
        d *= 1e-3 / np.linalg.norm(d)
        assert best <= huber_objective(X, Y, res.beta_hat + d, k) + 1e-12


def test_huber_objective_never_increases(rng):
    X, Y, _ = regression(rng, n=80, p=20)
    Y += 3 * rng.standard_t(1.5, 80)
    trace = []
    fit_huber(X, Y, 0.5, trace=trace)
    assert len(trace) > 2
    assert np.all(np.diff(trace) <= 1e-10 * trace[0])


def test_huber_singular_system_gets_jitter(rng):
    X = rng.standard_normal((6, 10))
    res = fit_huber(X, rng.standard_normal(6), 1.0)
    assert "jitter" in res.flags
    assert np.all(np.isfinite(res.beta_hat))


# -- james-stein ---------------------------------------------------------------------

def test_james_stein_hand_computation(toy):
    res = fit_james_stein(*toy, 1.0)
    np.testing.assert_allclose(res.beta_hat, [0.5])


def test_james_stein_tiny_c_is_ols(rng):
    X, Y, _ = regression(rng)
    assert np.abs(fit_james_stein(X, Y, 1e-15).beta_hat - fit_ols(X, Y).beta_hat).max() < 1e-12


def test_james_stein_full_shrinkage_point(rng):
    X, Y, _ = regression(rng)
    ols = fit_ols(X, Y).beta_hat
    c = float(ols @ X.T @ X @ ols) / X.shape[1]
    assert np.abs(fit_james_stein(X, Y, c).beta_hat).max() < 1e-12


def test_james_stein_degenerate_denominator():
    res = fit_james_stein(np.ones((3, 2)), np.zeros(3), 1.0)
    assert res.flags["degenerate_shrinkage"]
    np.testing.assert_array_equal(res.beta_hat, np.zeros(2))


# -- subsets and symmetry --------------------------------------------------------------

def test_fit_on_subset_empty_exclusion_is_plain_fit(rng):
    X, Y, _ = regression(rng)
    for spec in ALL_SPECS:
        np.testing.assert_array_equal(fit_on_subset(spec, X, Y, ()).beta_hat, fit(spec, X, Y).beta_hat)


def test_fit_on_subset_hand_computation(toy):
    np.testing.assert_allclose(fit_on_subset(EstimatorSpec("ols"), *toy, [0]).beta_hat, [2.0])


def test_fit_on_subset_matches_reduced_matrices(rng):
    X, Y, _ = regression(rng)
    for spec in ALL_SPECS:
        a = fit_on_subset(spec, X, Y, [3, 7]).beta_hat
        b = fit_on_subset(spec, X, Y, [7, 3, 7]).beta_hat
        c = fit(spec, np.delete(X, [3, 7], axis=0), np.delete(Y, [3, 7])).beta_hat
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)


def test_fit_on_subset_errors(toy):
    with pytest.raises(ValueError, match="no rows"):
        fit_on_subset(EstimatorSpec("ols"), *toy, [0, 1])
    with pytest.raises(IndexError):
        fit_on_subset(EstimatorSpec("ols"), *toy, [5])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), spec=st.sampled_from(ALL_SPECS))
def test_row_permutation_symmetry(seed, spec):
    rng = np.random.default_rng(seed)
    X, Y, _ = regression(rng, n=40, p=6)
    perm = rng.permutation(40)
    a = fit(spec, X, Y).beta_hat
    b = fit(spec, X[perm], Y[perm]).beta_hat
    assert np.abs(a - b).max() <= 10 * spec.tol
