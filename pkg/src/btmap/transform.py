"""Applying a fitted map: coefficients, sampling, and density evaluation.

The fitted map sends a field ``y`` to standard-Gaussian coefficients
``z`` one ordered variable at a time.  Under the full posterior the
residual of row i is Student-t with ``2 * alpha_tilde`` degrees of
freedom, location ``fhat_i`` and scale ``dhat_i * sqrt(v_i + 1)``,
where ``fhat_i`` and ``v_i`` are the usual Gaussian-process predictive
mean and variance at the neighbor values; the coefficient is the
Gaussian score of that t residual.  The simplified variant drops the
predictive variance and the t correction, using ``(y - fhat) / dhat``
directly, which is cheaper and asymptotically equivalent but understates
tail mass at small n.

``forward`` and ``logpdf`` vectorize over rows of a field matrix;
``inverse`` must walk the ordering sequentially but vectorizes across
fields at each step.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DataError
from .kernels import kernel_eval
from .stats import gauss_to_t, norm_logpdf, t_logpdf, t_to_gauss
from .util import as_field_matrix


@dataclass
class Coefficients:
    """Gaussian coefficients of one or more fields.

    ``z`` has one column per ordered position (not original column
    order).  ``n_clamped`` counts coefficient entries that hit the
    Gaussian-score clamp; nonzero values flag fields far outside the
    training distribution.
    """

    z: np.ndarray
    n_clamped: int = 0


def gp_predict(row, xstar):
    """Predictive mean and variance of one row's regression function.

    Parameters
    ----------
    row : FittedRow
    xstar : ndarray, shape (a, m) or (m,)

    Returns
    -------
    fhat : ndarray, shape (a,)
    v : ndarray, shape (a,)
        Predictive variance of the regression function in units of the
        row's noise scale; identically zero for the first ordered
        variable.
    """
    xstar = np.asarray(xstar, dtype=float)
    if xstar.ndim == 1:
        xstar = xstar[None, :]
    # extreme inputs overflow to inf/nan here and surface downstream as
    # non-finite densities, so the arithmetic itself should not warn
    with np.errstate(invalid="ignore", over="ignore"):
        k = kernel_eval(row.prior, xstar, row.train_x)
        fhat = k @ row.solve_y
        u = xstar * row.prior.q
        diag = np.einsum("ij,ij->i", u, u)
        if row.prior.sigma2 > 0.0:
            diag = diag + row.prior.sigma2
        diag = diag / row.prior.mean_d2
        w = solve_triangular(row.chol, k.T, lower=True, check_finite=False)
        v = diag - np.einsum("ij,ij->j", w, w)
    return fhat, np.clip(v, 0.0, None)


def _to_ordered(fmap, y):
    y = as_field_matrix(y, N=fmap.N, name="fields")
    ys = (y - fmap.mean) / fmap.sd
    return ys[:, fmap.ordering.perm]


def _from_ordered(fmap, y_ord):
    ys = y_ord[:, fmap.ordering.inverse]
    return ys * fmap.sd + fmap.mean


def forward(fmap, y):
    """Map fields to Gaussian coefficients.

    ``y`` is one field (N,) or a stack (k, N) in original units and
    column order; the result has one coefficient column per ordered
    position.
    """
    single = np.asarray(y).ndim == 1
    y_ord = _to_ordered(fmap, y)
    k = y_ord.shape[0]
    z = np.empty_like(y_ord)
    clamped = 0
    for i, row in enumerate(fmap.rows):
        cols = fmap.ordering.neighbors[i][: row.prior.m]
        fhat, v = gp_predict(row, y_ord[:, cols])
        dhat = np.sqrt(row.d_hat2)
        if fmap.simplified:
            z[:, i] = (y_ord[:, i] - fhat) / dhat
        else:
            u = (y_ord[:, i] - fhat) / (dhat * np.sqrt(v + 1.0))
            z[:, i], c = t_to_gauss(u, 2.0 * row.alpha_tilde)
            clamped += c
    return Coefficients(z=z[0] if single else z, n_clamped=clamped)


def inverse(fmap, z):
    """Map Gaussian coefficients back to fields (original units and order)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.shape[1] != fmap.N:
        raise DataError(f"coefficients have {z.shape[1]} columns, expected {fmap.N}")
    y_ord = np.empty_like(z)
    for i, row in enumerate(fmap.rows):
        cols = fmap.ordering.neighbors[i][: row.prior.m]
        fhat, v = gp_predict(row, y_ord[:, cols])
        dhat = np.sqrt(row.d_hat2)
        if fmap.simplified:
            y_ord[:, i] = fhat + z[:, i] * dhat
        else:
            u, _ = gauss_to_t(z[:, i], 2.0 * row.alpha_tilde)
            y_ord[:, i] = fhat + u * dhat * np.sqrt(v + 1.0)
    y = _from_ordered(fmap, y_ord)
    return y[0] if single else y


def sample(fmap, rng, count=1):
    """Draw fields from the posterior predictive, shape (count, N)."""
    z = rng.standard_normal((count, fmap.N))
    return inverse(fmap, z)


def conditional_sample(fmap, y, k, rng, count=1):
    """Sample fields whose first ``k`` ordered variables are pinned to ``y``.

    The coefficients of the first ``k`` ordered positions are taken from
    forwarding ``y``; the remaining positions get fresh standard-normal
    draws.  Because the maximin ordering is coarse-to-fine, small ``k``
    fixes the large-scale structure and resamples detail.
    """
    if not 0 <= k <= fmap.N:
        raise DataError(f"k must lie in 0..{fmap.N}, got {k}")
    z = rng.standard_normal((count, fmap.N))
    if k > 0:
        zref = forward(fmap, y).z
        z[:, :k] = np.atleast_2d(zref)[0, :k]
    return inverse(fmap, z)


def logpdf(fmap, y):
    """Posterior predictive log density of fields, in original units.

    Returns a scalar for a single field, else one value per row of
    ``y``.  The per-variable predictive is Student-t (Gaussian for a
    simplified map); the standardization Jacobian is included.
    """
    single = np.asarray(y).ndim == 1
    y_ord = _to_ordered(fmap, y)
    out = np.zeros(y_ord.shape[0])
    for i, row in enumerate(fmap.rows):
        cols = fmap.ordering.neighbors[i][: row.prior.m]
        fhat, v = gp_predict(row, y_ord[:, cols])
        dhat = np.sqrt(row.d_hat2)
        if fmap.simplified:
            out += norm_logpdf(y_ord[:, i], fhat, row.d_hat2)
        else:
            scale = dhat * np.sqrt(v + 1.0)
            out += t_logpdf(y_ord[:, i], 2.0 * row.alpha_tilde, loc=fhat, scale=scale)
    out -= np.sum(np.log(fmap.sd))
    return float(out[0]) if single else out
