"""Distribution functions used by the transport map.

Student-t and Gaussian CDFs and quantiles are evaluated through the
regularized incomplete beta function and the scaled complementary error
function (``scipy.special``).  Compositions like ``Phi^{-1}(F_t(x))``
lose precision in the upper tail if evaluated naively, because the CDF
value rounds to 1 before the quantile is taken.  Every composition here
is therefore evaluated on the lower tail and reflected: both CDFs are
symmetric about zero, so ``Phi^{-1}(F(u)) = -Phi^{-1}(F(-u))``, and the
lower-tail branch keeps full relative precision in the tail probability
itself.

Gaussian scores are clamped to ``|z| <= Z_CLAMP``; beyond that point a
double-precision CDF is exactly 1 and the composition is no longer
invertible anyway.  All clamp events are counted and reported upward.
"""

import numpy as np
from scipy import special

# Largest Gaussian score passed to / produced by CDF compositions.
Z_CLAMP = 8.2

_LOG_2PI = float(np.log(2.0 * np.pi))


def t_cdf(x, df):
    """Student-t CDF with ``df`` degrees of freedom, elementwise."""
    return special.stdtr(df, np.asarray(x, dtype=float))


def t_ppf(p, df):
    """Student-t quantile function, elementwise."""
    return special.stdtrit(df, np.asarray(p, dtype=float))


def t_to_gauss(x, df):
    """Map t-distributed values to Gaussian scores, ``Phi^{-1}(F_df(x))``.

    Evaluated symmetrically: positive arguments are reflected so the
    tail probability is always computed on the lower tail.  Scores are
    clamped to ``+-Z_CLAMP``.

    Returns
    -------
    z : ndarray
        Gaussian scores, same shape as ``x``.
    n_clamped : int
        Number of entries that hit the clamp (including any non-finite
        intermediate results).
    """
    x = np.asarray(x, dtype=float)
    df = np.broadcast_to(np.asarray(df, dtype=float), x.shape)
    neg = x <= 0.0
    u = np.where(neg, x, -x)
    z = special.ndtri(special.stdtr(df, u))
    z = np.where(neg, z, -z)
    bad = ~np.isfinite(z) | (np.abs(z) > Z_CLAMP)
    n_clamped = int(np.count_nonzero(bad))
    if n_clamped:
        # a CDF that rounded to 0 or 1 means the input sat beyond the
        # representable tail: pin it to the clamp on the matching side
        z = np.where(np.isfinite(z), z, np.where(neg, -Z_CLAMP, Z_CLAMP))
        z = np.clip(z, -Z_CLAMP, Z_CLAMP)
    return z, n_clamped


def gauss_to_t(z, df):
    """Map Gaussian scores to t-distributed values, ``F_df^{-1}(Phi(z))``.

    Inverse companion of :func:`t_to_gauss`; uses the same reflection
    and clamps ``|z|`` at ``Z_CLAMP`` before inverting.

    Returns
    -------
    x : ndarray
    n_clamped : int
    """
    z = np.asarray(z, dtype=float)
    df = np.broadcast_to(np.asarray(df, dtype=float), z.shape)
    bad = ~np.isfinite(z) | (np.abs(z) > Z_CLAMP)
    n_clamped = int(np.count_nonzero(bad))
    if n_clamped:
        z = np.clip(np.nan_to_num(z, nan=0.0), -Z_CLAMP, Z_CLAMP)
    neg = z <= 0.0
    u = np.where(neg, z, -z)
    x = special.stdtrit(df, special.ndtr(u))
    return np.where(neg, x, -x), n_clamped


def t_logpdf(x, df, loc=0.0, scale=1.0):
    """Log density of a scaled, shifted Student-t, elementwise."""
    x = np.asarray(x, dtype=float)
    df = np.asarray(df, dtype=float)
    scale = np.asarray(scale, dtype=float)
    # u*u may overflow to inf for extreme inputs; the density is then
    # -inf, which callers treat as an exclusion signal
    with np.errstate(over="ignore"):
        u = (x - loc) / scale
        return (
            special.gammaln((df + 1.0) / 2.0)
            - special.gammaln(df / 2.0)
            - 0.5 * np.log(df * np.pi)
            - np.log(scale)
            - (df + 1.0) / 2.0 * np.log1p(u * u / df)
        )


def norm_logpdf(x, mean=0.0, var=1.0):
    """Log density of a Gaussian with the given mean and variance."""
    x = np.asarray(x, dtype=float)
    var = np.asarray(var, dtype=float)
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def norm_cdf(x):
    return special.ndtr(np.asarray(x, dtype=float))


def norm_ppf(p):
    return special.ndtri(np.asarray(p, dtype=float))


def mvn_logpdf_chol(y, chol, mean=None):
    """Multivariate-normal log density from a Cholesky factor.

    Parameters
    ----------
    y : ndarray, shape (n,) or (k, n)
    chol : ndarray, shape (n, n)
        Lower-triangular factor of the covariance.
    mean : ndarray or None
        Mean vector; zero when omitted.
    """
    from scipy.linalg import solve_triangular

    y = np.atleast_2d(np.asarray(y, dtype=float))
    if mean is not None:
        y = y - mean
    n = chol.shape[0]
    w = solve_triangular(chol, y.T, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (n * _LOG_2PI + logdet + np.sum(w * w, axis=0))
    return out if out.size > 1 else float(out[0])
