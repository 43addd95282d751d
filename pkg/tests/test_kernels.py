"""Hyperparameter schedules, sparsity rule, and kernel evaluation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btmap import DataError, Hyper, kernel_eval, row_prior, sparsity_m
from btmap.kernels import RowPrior, matern_corr


def make_hyper(**kw):
    base = dict(
        theta_sigma1=np.log(0.5),
        theta_sigma2=1.2,
        theta_d1=np.log(0.3),
        theta_d2=0.9,
        theta_gamma=np.log(0.8),
        theta_q=-0.6,
    )
    base.update(kw)
    return Hyper(**base)


def test_alpha_from_g():
    assert make_hyper().alpha == pytest.approx(2.0625, abs=1e-15)
    assert Hyper.from_theta(np.zeros(6) - [0, 0, 0, 0, 0, 1], g=2.0).alpha == 2.25


def test_sparsity_reference_case():
    # e^{-4} = 0.0183 >= 0.01 > e^{-5}
    assert sparsity_m(-1.0, 0.01) == 4


def test_sparsity_matches_direct_scan():
    for theta_q in (-0.05, -0.3, -0.7, -1.0, -2.5, -np.log(100.0)):
        for eps in (0.5, 0.1, 0.01, 0.001):
            ks = np.arange(1, 200)
            ok = np.exp(theta_q * ks) >= eps
            expect = min(30, int(ks[ok].max()) if ok.any() else 0)
            assert sparsity_m(theta_q, eps) == expect


def test_sparsity_boundary_exact():
    # exp(theta_q * m) == eps exactly at the cutoff keeps neighbor m
    eps = float(np.exp(-3.0))
    assert sparsity_m(-1.0, eps) == 3


def test_sparsity_nonnegative_rate_hits_cap():
    assert sparsity_m(0.0, 0.01, m_max=12) == 12


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-3.0, -0.01),
    st.floats(0.001, 0.5),
    st.floats(0.001, 0.4),
)
def test_sparsity_monotone_in_epsilon(theta_q, eps, bump):
    assert sparsity_m(theta_q, eps + bump) <= sparsity_m(theta_q, eps)


def test_hyper_validation():
    with pytest.raises(DataError):
        make_hyper(theta_d1=np.nan)
    with pytest.raises(DataError):
        make_hyper(theta_sigma1=np.inf)
    with pytest.raises(DataError):
        make_hyper(g=-1.0)
    with pytest.raises(DataError):
        make_hyper(epsilon=1.5)
    with pytest.raises(DataError):
        make_hyper(matern_nu=1.0)
    with pytest.raises(DataError):
        Hyper.from_theta(np.zeros(5))
    # -inf variance intercept is the linear switch, not an error
    h = make_hyper(theta_sigma1=-np.inf)
    assert not h.nonlinear


def test_row_prior_schedules():
    h = make_hyper()
    ell = 0.37
    p = row_prior(h, ell, index=10)
    assert p.mean_d2 == pytest.approx(0.3 * ell**0.9, rel=1e-14)
    assert p.sigma2 == pytest.approx(0.5 * ell**1.2, rel=1e-14)
    assert p.alpha == pytest.approx(2.0625)
    assert p.beta == pytest.approx(p.mean_d2 * (1.0 + 1.0 / 16.0), rel=1e-14)
    assert p.gamma == pytest.approx(0.8, rel=1e-14)
    np.testing.assert_allclose(p.q, np.exp(-0.6 * np.arange(1, p.m + 1)), rtol=1e-14)
    assert np.all(np.diff(p.q) < 0)
    assert np.all(p.q >= h.epsilon)


def test_row_prior_clips_m_to_index():
    h = make_hyper(theta_q=-0.1)  # m = min(30, 46) = 30
    assert h.m == 30
    assert row_prior(h, 0.5, index=3).m == 3
    assert row_prior(h, 0.5, index=100).m == 30


def test_row_prior_first_position_degenerate_kernel():
    p = row_prior(make_hyper(), 1.7, index=0)
    assert p.sigma2 == 0.0
    assert p.m == 0


def test_row_prior_linear_only():
    h = make_hyper(linear_only=True)
    assert row_prior(h, 0.5, index=9).sigma2 == 0.0
    assert row_prior(make_hyper(theta_sigma1=-np.inf), 0.5, 9).sigma2 == 0.0


def test_row_prior_errors():
    with pytest.raises(DataError):
        row_prior(make_hyper(), -0.5, 1)
    with pytest.raises(DataError):
        row_prior(make_hyper(), np.inf, 1)
    with pytest.raises(DataError):
        # ell = 0 with a positive exponent degenerates the noise scale
        row_prior(make_hyper(), 0.0, 1)


def test_mean_d2_shift_by_exp_factor():
    h0, h1 = make_hyper(), make_hyper(theta_d1=np.log(0.3) + 1.3)
    p0, p1 = row_prior(h0, 0.42, 5), row_prior(h1, 0.42, 5)
    assert p1.mean_d2 == pytest.approx(np.exp(1.3) * p0.mean_d2, rel=1e-13)


def test_kernel_hand_case():
    # m = 2, two points each side, scalar evaluation by the definition
    p = RowPrior(
        sigma2=0.7,
        gamma=1.3,
        q=np.array([np.exp(-0.5), np.exp(-1.0)]),
        alpha=2.0625,
        beta=0.2,
        mean_d2=0.19,
        matern_nu=1.5,
    )
    X = np.array([[1.0, -0.5], [0.2, 2.0]])
    X2 = np.array([[0.0, 1.0], [-1.0, 0.3]])
    K = kernel_eval(p, X, X2)
    for a in range(2):
        for b in range(2):
            u = X[a] * p.q
            v = X2[b] * p.q
            t = np.sqrt(np.sum((u - v) ** 2)) / p.gamma
            rho = (1.0 + np.sqrt(3.0) * t) * np.exp(-np.sqrt(3.0) * t)
            expect = (u @ v + p.sigma2 * rho) / p.mean_d2
            assert K[a, b] == pytest.approx(expect, rel=1e-13)


def test_kernel_unscaled_option():
    p = row_prior(make_hyper(), 0.5, 4)
    X = np.random.default_rng(0).normal(size=(3, p.m))
    np.testing.assert_allclose(
        kernel_eval(p, X, scaled=False), kernel_eval(p, X) * p.mean_d2, rtol=1e-13
    )


def test_kernel_zero_when_both_components_vanish():
    p = RowPrior(
        sigma2=0.0,
        gamma=1.0,
        q=np.zeros(3),
        alpha=2.0625,
        beta=0.2,
        mean_d2=0.19,
    )
    X = np.random.default_rng(1).normal(size=(4, 3))
    assert np.all(kernel_eval(p, X) == 0.0)


def test_kernel_identical_rows_diagonal():
    p = row_prior(make_hyper(), 0.5, 6)
    x = np.random.default_rng(2).normal(size=(1, p.m))
    X = np.repeat(x, 3, axis=0)
    K = kernel_eval(p, X)
    u = x[0] * p.q
    expect = (u @ u + p.sigma2) / p.mean_d2  # rho(0) = 1
    np.testing.assert_allclose(K, np.full((3, 3), expect), rtol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(2, 10))
def test_kernel_positive_semidefinite(seed, m, a):
    rng = np.random.default_rng(seed)
    h = make_hyper(theta_q=-float(rng.uniform(0.1, 1.5)))
    p = row_prior(h, float(rng.uniform(0.05, 2.0)), index=m)
    X = rng.normal(size=(a, p.m))
    K = kernel_eval(p, X)
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    w = np.linalg.eigvalsh(K)
    assert w.min() >= -1e-10 * max(np.trace(K), 1.0)


def test_kernel_empty_neighbor_matrix():
    p = row_prior(make_hyper(), 0.5, index=0)
    K = kernel_eval(p, np.empty((3, 0)))
    # zero-arity kernel: only the nonlinear part at zero distance survives,
    # and position 0 has sigma2 = 0, so the matrix vanishes
    assert K.shape == (3, 3)
    assert np.all(K == 0.0)


def test_kernel_dimension_mismatch():
    p = row_prior(make_hyper(), 0.5, 6)
    with pytest.raises(DataError, match="columns"):
        kernel_eval(p, np.zeros((3, p.m + 1)))


def test_matern_closed_forms():
    t = np.linspace(0.0, 3.0, 7)
    np.testing.assert_allclose(matern_corr(t, 0.5), np.exp(-t), rtol=1e-14)
    s = np.sqrt(5.0) * t
    np.testing.assert_allclose(
        matern_corr(t, 2.5), (1.0 + s + s**2 / 3.0) * np.exp(-s), rtol=1e-14
    )
    assert matern_corr(0.0, 1.5) == 1.0
    assert np.all(np.diff(matern_corr(t, 1.5)) < 0)
    with pytest.raises(DataError):
        matern_corr(t, 2.0)


def test_matern_variants_through_kernel():
    h05 = make_hyper(matern_nu=0.5)
    p = row_prior(h05, 0.5, 4)
    X = np.random.default_rng(3).normal(size=(2, p.m))
    U = X * p.q
    t = np.sqrt(np.sum((U[0] - U[1]) ** 2)) / p.gamma
    expect = (U[0] @ U[1] + p.sigma2 * np.exp(-t)) / p.mean_d2
    assert kernel_eval(p, X)[0, 1] == pytest.approx(expect, rel=1e-13)
