"""Held-out scoring, KL estimation, Gaussian baselines, and diagnostics.

A "provider" here is any callable mapping a (k, N) stack of fields to k
log densities in original data units; fitted maps, DPM chains, true
scenario models and the Gaussian baselines all expose one.  Scores are
means over test fields with Monte Carlo standard errors, so method
comparisons can be read against sampling noise.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import DataError, NumericalError
from .stats import mvn_logpdf_chol, norm_ppf
from .transform import forward
from .util import as_field_matrix, chol_with_jitter


@dataclass
class ScoreReport:
    """Mean negative log density over test fields, with its uncertainty."""

    method: str
    mean: float
    se: float
    per_field: np.ndarray
    n_fields: int
    n_excluded: int = 0
    n: int = None
    N: int = None
    seed: int = None


@dataclass
class KLReport:
    """Monte Carlo estimate of KL(truth || provider) over test fields."""

    value: float
    se: float
    per_field: np.ndarray
    n_excluded: int = 0


def _clean(values):
    values = np.asarray(values, dtype=float)
    keep = np.isfinite(values)
    return values[keep], int(np.count_nonzero(~keep))


def log_score(provider, test_fields, method="", n=None, seed=None):
    """Mean negative log density of held-out fields under a provider.

    Fields where the provider returns a non-finite value are excluded
    and counted in the report.
    """
    test_fields = as_field_matrix(test_fields, name="test_fields")
    if test_fields.shape[0] < 2:
        raise DataError("need at least 2 test fields to report a standard error")
    vals, excluded = _clean(provider(test_fields))
    if vals.size < 2:
        raise NumericalError("provider returned too few finite log densities")
    per_field = -vals
    return ScoreReport(
        method=method,
        mean=float(per_field.mean()),
        se=float(per_field.std(ddof=1) / np.sqrt(per_field.size)),
        per_field=per_field,
        n_fields=int(per_field.size),
        n_excluded=excluded,
        n=n,
        N=test_fields.shape[1],
        seed=seed,
    )


def kl_estimate(true_map, provider, test_fields):
    """KL divergence from the truth to a provider, estimated on samples.

    ``test_fields`` must be draws from ``true_map``; the estimate is the
    mean of ``true_logpdf - provider_logpdf`` with its standard error.
    """
    from .scenarios import true_logpdf

    test_fields = as_field_matrix(test_fields, name="test_fields")
    diff = true_logpdf(true_map, test_fields) - np.asarray(provider(test_fields), dtype=float)
    vals, excluded = _clean(diff)
    if vals.size < 2:
        raise NumericalError("provider returned too few finite log densities")
    return KLReport(
        value=float(vals.mean()),
        se=float(vals.std(ddof=1) / np.sqrt(vals.size)),
        per_field=vals,
        n_excluded=excluded,
    )


class GaussianDensity:
    """Zero-mean Gaussian log-density provider with a fixed covariance."""

    def __init__(self, cov, label=""):
        self.cov = np.asarray(cov, dtype=float)
        self.label = label
        self.chol, _ = chol_with_jitter(self.cov, label=label or "baseline covariance")

    def __call__(self, fields):
        fields = as_field_matrix(fields, N=self.cov.shape[0], name="fields")
        out = mvn_logpdf_chol(fields, self.chol)
        return np.atleast_1d(out)


def _pairwise_dist(locs):
    locs = np.asarray(locs, dtype=float)
    d2 = (
        np.sum(locs * locs, axis=1)[:, None]
        + np.sum(locs * locs, axis=1)[None, :]
        - 2.0 * locs @ locs.T
    )
    return np.sqrt(np.clip(d2, 0.0, None))


def baseline_samp_tap(Y_train, locs, ridge=1e-6, taper_range=None):
    """Tapered-sample-covariance Gaussian baseline.

    The zero-mean sample covariance is multiplied elementwise by an
    exponential correlation whose range is the maximum pairwise
    distance (overridable via ``taper_range``), which keeps it positive
    semidefinite while damping long-range noise; a small ridge
    proportional to the mean diagonal makes it invertible in the n < N
    regime.
    """
    Y = as_field_matrix(Y_train, name="Y_train")
    if Y.shape[0] < 2:
        raise DataError("need at least 2 training fields")
    D = _pairwise_dist(locs)
    if D.shape[0] != Y.shape[1]:
        raise DataError("locations and replicate columns disagree")
    S = Y.T @ Y / Y.shape[0]
    taper = np.exp(-D / (D.max() if taper_range is None else float(taper_range)))
    cov = S * taper
    cov = cov + ridge * float(np.mean(np.diag(cov))) * np.eye(cov.shape[0])
    return GaussianDensity(cov, label="sampTap")


def baseline_exp_cov(Y_train, locs, maxfev=200, fatol=1e-4):
    """Exponential-covariance Gaussian baseline with fitted (variance, range).

    Maximizes the zero-mean Gaussian likelihood over log-variance and
    log-range with the same simplex search used for map fitting.
    """
    Y = as_field_matrix(Y_train, name="Y_train")
    if Y.shape[0] < 2:
        raise DataError("need at least 2 training fields")
    D = _pairwise_dist(locs)
    if D.shape[0] != Y.shape[1]:
        raise DataError("locations and replicate columns disagree")
    dmax = float(D.max())

    def objective(x):
        var, rng_ = np.exp(x[0]), np.exp(x[1])
        try:
            dens = GaussianDensity(var * np.exp(-D / rng_))
        except NumericalError:
            return 1e300
        val = -float(np.sum(dens(Y)))
        return val if np.isfinite(val) else 1e300

    x0 = np.array([np.log(max(np.mean(Y * Y), 1e-12)), np.log(dmax / 4.0)])
    res = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        options=dict(fatol=fatol, xatol=1e-4, maxfev=maxfev, maxiter=10**7),
    )
    if not np.isfinite(res.fun) or res.fun >= 1e300:
        raise NumericalError("exponential-covariance likelihood fit failed")
    var, rng_ = float(np.exp(res.x[0])), float(np.exp(res.x[1]))
    out = GaussianDensity(var * np.exp(-D / rng_), label="expCov")
    out.variance = var
    out.range_ = rng_
    return out


@dataclass
class CoefDiagnostics:
    """Moments and shape checks of held-out map coefficients."""

    pooled_mean: float
    pooled_var: float
    coord_mean: np.ndarray
    coord_var: np.ndarray
    qq_theoretical: np.ndarray
    qq_empirical: np.ndarray
    qq_max_dev: float
    lag1: np.ndarray = None
    sequence_length: int = 0
    n_fields: int = 0
    n_clamped: int = 0


def coef_diagnostics(fmap, test_fields, field_sequence=None, qq_points=99):
    """Summaries of map coefficients on held-out fields.

    Under a well-calibrated map the coefficients are approximately iid
    standard normal, so the pooled mean should be near 0, the pooled
    variance near 1, the QQ pairs near the diagonal, and (for a time
    sequence of fields) per-coordinate lag-1 autocorrelations near 0.
    """
    coefs = forward(fmap, test_fields)
    z = np.atleast_2d(coefs.z)
    flat = z.ravel()
    probs = (np.arange(1, qq_points + 1) - 0.5) / qq_points
    q_th = norm_ppf(probs)
    q_emp = np.quantile(flat, probs)
    lag1 = None
    seq_len = 0
    if field_sequence is not None:
        zs = np.atleast_2d(forward(fmap, field_sequence).z)
        seq_len = zs.shape[0]
        if zs.shape[0] < 3:
            raise DataError("field_sequence needs at least 3 fields for lag-1 correlation")
        centered = zs - zs.mean(axis=0)
        num = np.sum(centered[:-1] * centered[1:], axis=0)
        den = np.sum(centered * centered, axis=0)
        lag1 = num / np.where(den == 0, np.nan, den)
    return CoefDiagnostics(
        pooled_mean=float(flat.mean()),
        pooled_var=float(flat.var(ddof=1)),
        coord_mean=z.mean(axis=0),
        coord_var=z.var(axis=0, ddof=1),
        qq_theoretical=q_th,
        qq_empirical=q_emp,
        qq_max_dev=float(np.max(np.abs(q_emp - q_th))),
        lag1=lag1,
        sequence_length=seq_len,
        n_fields=int(z.shape[0]),
        n_clamped=coefs.n_clamped,
    )
