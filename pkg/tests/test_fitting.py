"""Conjugate row regressions and the integrated likelihood against oracles."""

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import invgamma, multivariate_t

from btmap import (
    DataError,
    Hyper,
    NumericalError,
    Ordering,
    fit_map,
    integrated_loglik,
    kernel_eval,
    maximin_order,
    row_prior,
)
from btmap.fitting import fit_row, loglik_terms
from btmap.util import chol_with_jitter


def make_hyper(**kw):
    base = dict(
        theta_sigma1=np.log(0.4),
        theta_sigma2=1.0,
        theta_d1=np.log(0.5),
        theta_d2=1.0,
        theta_gamma=0.0,
        theta_q=-0.7,
    )
    base.update(kw)
    return Hyper(**base)


def single_row_ordering():
    return Ordering(
        perm=np.array([0]), ell=np.array([1.0]), neighbors=(np.empty(0, dtype=np.int64),)
    )


def dense_mvt_loglik(Y_ord, ordering, hyper):
    """Reference: product of dense multivariate-t row predictives."""
    n, N = Y_ord.shape
    total = 0.0
    for i in range(N):
        prior = row_prior(hyper, ordering.ell[i], i)
        cols = ordering.neighbors[i][: prior.m]
        G = kernel_eval(prior, Y_ord[:, cols]) + np.eye(n)
        shape = (prior.beta / prior.alpha) * G
        total += multivariate_t.logpdf(Y_ord[:, i], loc=np.zeros(n), shape=shape, df=2 * prior.alpha)
    return total


def test_first_row_hand_case():
    prior = row_prior(make_hyper(), 1.0, index=0)
    y = np.ones(4)
    fr = fit_row(y, np.empty((4, 0)), prior, index=0)
    assert fr.alpha_tilde == pytest.approx(4.0625, abs=1e-15)
    assert fr.beta_tilde == pytest.approx(prior.beta + 2.0, rel=1e-14)
    assert fr.d_hat2 == pytest.approx(fr.beta_tilde / 4.0625, rel=1e-14)


def test_alpha_tilde_with_ten_replicates():
    prior = row_prior(make_hyper(), 1.0, index=0)
    fr = fit_row(np.random.default_rng(0).normal(size=10), np.empty((10, 0)), prior)
    assert fr.alpha_tilde == pytest.approx(7.0625, abs=1e-15)


def test_row_statistics_match_dense_inversion():
    rng = np.random.default_rng(1)
    prior = row_prior(make_hyper(), 0.6, index=5)
    X = rng.normal(size=(3, prior.m))
    y = rng.normal(size=3)
    fr = fit_row(y, X, prior, index=5)
    G = kernel_eval(prior, X) + np.eye(3)
    Ginv = np.linalg.inv(G)
    assert fr.beta_tilde == pytest.approx(prior.beta + 0.5 * y @ Ginv @ y, rel=1e-12)
    np.testing.assert_allclose(fr.solve_y, Ginv @ y, rtol=1e-10)
    np.testing.assert_allclose(fr.chol @ fr.chol.T, G, rtol=1e-12, atol=1e-14)
    assert np.all(np.diag(fr.chol) > 0)


def test_integrated_loglik_matches_multivariate_t_product():
    rng = np.random.default_rng(2)
    locs = rng.uniform(size=(5, 2))
    Y = rng.normal(size=(3, 5))
    ordering = maximin_order(locs)
    hyper = make_hyper()
    Y_ord = Y[:, ordering.perm]
    ll = integrated_loglik(Y_ord, ordering, hyper)
    oracle = dense_mvt_loglik(Y_ord, ordering, hyper) + 0.5 * 5 * 3 * np.log(2 * np.pi)
    assert ll == pytest.approx(oracle, rel=1e-10)


def test_single_variable_reduces_to_exchangeable_t():
    rng = np.random.default_rng(3)
    y = rng.normal(size=6)
    ordering = single_row_ordering()
    hyper = make_hyper()
    ll = integrated_loglik(y[:, None] * np.ones((6, 1))[:, :1], ordering, hyper)
    prior = row_prior(hyper, 1.0, 0)
    oracle = multivariate_t.logpdf(
        y, loc=np.zeros(6), shape=(prior.beta / prior.alpha) * np.eye(6), df=2 * prior.alpha
    )
    assert ll == pytest.approx(oracle + 0.5 * 6 * np.log(2 * np.pi), rel=1e-12)


def test_integrated_loglik_matches_scale_quadrature():
    # integrate the noise variance out numerically, row by row
    rng = np.random.default_rng(4)
    locs = np.array([[0.0, 0.0], [1.0, 0.0]])
    Y = rng.normal(size=(2, 2))
    ordering = maximin_order(locs)
    hyper = make_hyper(theta_sigma1=-np.inf)  # linear kernel keeps G simple
    Y_ord = Y[:, ordering.perm]

    def row_marginal(i):
        prior = row_prior(hyper, ordering.ell[i], i)
        cols = ordering.neighbors[i][: prior.m]
        G = kernel_eval(prior, Y_ord[:, cols]) + np.eye(2)
        y = Y_ord[:, i]
        Ginv = np.linalg.inv(G)
        _, logdet = np.linalg.slogdet(G)
        quad_form = y @ Ginv @ y

        def integrand(d2):
            log_norm = -np.log(2 * np.pi * d2) - 0.5 * logdet - 0.5 * quad_form / d2
            return np.exp(log_norm) * invgamma.pdf(d2, prior.alpha, scale=prior.beta)

        val, err = quad(integrand, 0.0, np.inf, limit=200)
        assert err < 1e-7 * val
        return np.log(val)

    oracle = row_marginal(0) + row_marginal(1)
    ll = integrated_loglik(Y_ord, ordering, hyper)
    assert ll - 2.0 * np.log(2 * np.pi) == pytest.approx(oracle, abs=1e-6)


def test_terms_match_unbatched_row_loop():
    rng = np.random.default_rng(5)
    locs = rng.uniform(size=(40, 2))
    Y = rng.normal(size=(6, 40))
    ordering = maximin_order(locs)
    hyper = make_hyper(theta_q=-0.4)
    Y_ord = Y[:, ordering.perm]
    terms = loglik_terms(Y_ord, ordering, hyper)
    for i in range(40):
        prior = row_prior(hyper, ordering.ell[i], i)
        cols = ordering.neighbors[i][: prior.m]
        fr = fit_row(Y_ord[:, i], Y_ord[:, cols], prior, index=i)
        assert terms[i] == pytest.approx(fr.loglik_term, rel=1e-10, abs=1e-12)


def test_loglik_property_is_sum_of_row_terms(small_map):
    total = sum(r.loglik_term for r in small_map.rows)
    assert small_map.loglik == pytest.approx(total, rel=1e-14)


def test_row_invariants(small_map):
    n = small_map.n
    for r in small_map.rows:
        assert r.beta_tilde >= r.prior.beta - 1e-12
        assert r.alpha_tilde == pytest.approx(r.prior.alpha + 0.5 * n, abs=1e-12)
        assert r.alpha_tilde > 0.5 * n + 2
        assert r.d_hat2 > 0
        assert np.all(np.diag(r.chol) > 0)
        assert r.train_x.shape == (n, r.prior.m)


def test_fit_map_linear_only_zeroes_kernel_variance(small_truth):
    tm, locs = small_truth
    from btmap import scenario_sample

    Y = scenario_sample(tm, np.random.default_rng(6), 25)
    fmap = fit_map(Y, locs=locs, linear_only=True, restarts=1, maxfev=120)
    assert fmap.hyper.theta_sigma1 == -np.inf
    assert not fmap.hyper.nonlinear
    assert all(r.prior.sigma2 == 0.0 for r in fmap.rows)
    assert fmap.method == "linear"


def test_fit_beats_grid_around_generator(small_truth):
    # data sampled from a map with known hyperparameters: the optimum must
    # dominate a 3x3 grid around the generator values
    tm, locs = small_truth
    from btmap import sample, scenario_sample

    rng = np.random.default_rng(7)
    theta_star = np.array([np.log(0.3), 1.0, np.log(0.4), 1.0, 0.0, -0.8])
    seed_map = fit_map(
        scenario_sample(tm, rng, 40), locs=locs, theta=theta_star, optimize=False
    )
    Y = sample(seed_map, rng, 60)
    fitted = fit_map(Y, locs=locs, restarts=2, maxfev=500)
    Y_ord = ((Y - fitted.mean) / fitted.sd)[:, fitted.ordering.perm]
    for dd in (-0.3, 0.0, 0.3):
        for dg in (-0.3, 0.0, 0.3):
            theta = theta_star + np.array([0.0, 0.0, dd, 0.0, dg, 0.0])
            ll = integrated_loglik(Y_ord, fitted.ordering, Hyper.from_theta(theta))
            assert fitted.loglik >= ll - 1e-9


def test_fit_rows_bitwise_identical_across_threads(small_truth):
    tm, locs = small_truth
    from btmap import scenario_sample

    Y = scenario_sample(tm, np.random.default_rng(8), 20)
    kw = dict(theta=(np.log(0.3), 1.0, np.log(0.4), 1.0, 0.0, -0.8), optimize=False)
    one = fit_map(Y, locs=locs, threads=1, **kw)
    four = fit_map(Y, locs=locs, threads=4, **kw)
    for a, b in zip(one.rows, four.rows):
        assert np.array_equal(a.chol, b.chol)
        assert np.array_equal(a.solve_y, b.solve_y)
        assert a.beta_tilde == b.beta_tilde
        assert a.loglik_term == b.loglik_term


def test_optimizer_trace_recorded(small_truth):
    tm, locs = small_truth
    from btmap import scenario_sample

    Y = scenario_sample(tm, np.random.default_rng(9), 15)
    fmap = fit_map(Y, locs=locs, restarts=2, maxfev=60)
    assert len(fmap.trace) == 2
    assert {"restart", "loglik", "nfev", "converged"} <= set(fmap.trace[0])


def test_warns_when_search_cannot_improve(small_truth):
    tm, locs = small_truth
    from btmap import scenario_sample

    Y = scenario_sample(tm, np.random.default_rng(10), 15)
    with pytest.warns(RuntimeWarning, match="did not improve"):
        fit_map(Y, locs=locs, restarts=1, maxfev=1)


def test_fit_map_validation(small_truth):
    tm, locs = small_truth
    from btmap import scenario_sample

    Y = scenario_sample(tm, np.random.default_rng(11), 10)
    with pytest.raises(DataError, match="ordering"):
        fit_map(Y, locs=None)
    with pytest.raises(DataError, match="zero variance"):
        bad = Y.copy()
        bad[:, 3] = 2.5
        fit_map(bad, locs=locs)
    with pytest.raises(DataError, match="standardization"):
        fit_map(Y[:1], locs=locs)
    with pytest.raises(DataError, match="covers"):
        fit_map(Y[:, :10], locs=locs)
    with pytest.raises(DataError, match="theta_q"):
        fit_map(Y, locs=locs, theta=(0.0, 1.0, 0.0, 1.0, 0.0, 0.5))


def test_degenerate_hyper_scales_raise():
    rng = np.random.default_rng(12)
    locs = rng.uniform(size=(8, 2))
    Y = rng.normal(size=(4, 8))
    ordering = maximin_order(locs)
    with pytest.raises(NumericalError):
        loglik_terms(Y[:, ordering.perm], ordering, make_hyper(theta_d1=800.0))


def test_cholesky_jitter_gives_up_on_indefinite():
    with pytest.raises(NumericalError, match="row 7"):
        chol_with_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]), label="row 7")


def test_cholesky_jitter_recovers_semidefinite():
    mat = np.ones((3, 3))  # rank one, PSD
    L, jitter = chol_with_jitter(mat)
    assert jitter > 0
    np.testing.assert_allclose(L @ L.T, mat + jitter * np.eye(3), rtol=1e-12)
