"""Fitting the triangular map: conjugate row regressions and empirical Bayes.

Each ordered variable is regressed on its nearest predecessors.  The
regression function has a Gaussian-process prior scaled by the row's
noise variance, and the noise variance has an inverse-gamma prior, so
both integrate out in closed form.  The marginal likelihood of the
whole map is a sum of independent per-row terms

    -log|G_i|/2 + alpha*log(beta_i) - alpha_n*log(beta_n_i)
        + lgamma(alpha_n) - lgamma(alpha),

with ``G_i = K_i + I``, ``alpha_n = alpha + n/2`` and
``beta_n_i = beta_i + y_i' G_i^{-1} y_i / 2``, up to an additive
constant ``-(N*n/2) log(2*pi)`` that depends only on the data shape.
A handful of global hyperparameters tie the rows together and are
chosen by maximizing this likelihood with a derivative-free simplex
search.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import gammaln

from .errors import DataError, NumericalError
from .kernels import Hyper, kernel_eval, matern_corr, row_prior
from .ordering import maximin_order
from .util import as_field_matrix, chol_with_jitter, run_indexed

# Upper bound on elements of one stacked (rows, n, n) kernel block, to
# keep peak memory flat when batching thousands of rows.
_BLOCK_ELEMENTS = 4_194_304

_PENALTY = 1e300


@dataclass(frozen=True)
class FittedRow:
    """Sufficient statistics of one row's conjugate regression."""

    index: int
    prior: object
    train_x: np.ndarray
    chol: np.ndarray
    solve_y: np.ndarray
    alpha_tilde: float
    beta_tilde: float
    loglik_term: float
    jitter: float = 0.0

    @property
    def n(self):
        return self.train_x.shape[0]

    @property
    def d_hat2(self):
        """Posterior point estimate of the row's noise variance."""
        return self.beta_tilde / self.alpha_tilde


@dataclass
class FitConfig:
    """Options controlling ordering, priors, and the hyperparameter search."""

    linear_only: bool = False
    simplified: bool = False
    g: float = 4.0
    epsilon: float = 0.01
    m_max: int = 30
    matern_nu: float = 1.5
    metric: str = "euclidean"
    first: int = None
    standardize: bool = True
    theta: object = None
    optimize: bool = True
    restarts: int = 3
    maxfev: int = 500
    fatol: float = 1e-4
    xatol: float = 1e-4
    threads: int = 1


@dataclass(frozen=True)
class FittedMap:
    """A fitted triangular map: ordering, hyperparameters, row statistics.

    ``mean`` and ``sd`` record the per-column standardization applied to
    the training data (identity when standardization was disabled); all
    public density values are reported in the original data units.
    """

    ordering: object
    hyper: Hyper
    rows: tuple
    mean: np.ndarray
    sd: np.ndarray
    simplified: bool = False
    trace: tuple = field(default=(), compare=False, repr=False)

    @property
    def N(self):
        return self.ordering.N

    @property
    def n(self):
        return self.rows[0].train_x.shape[0]

    @property
    def loglik(self):
        """Integrated log likelihood at the fitted hyperparameters."""
        total = 0.0
        for r in self.rows:
            total += r.loglik_term
        return total

    @property
    def method(self):
        base = "nonlin" if self.hyper.nonlinear else "linear"
        return f"S-{base}" if self.simplified else base


def fit_row(y, X, prior, index=0):
    """Conjugate regression of one row given its covariates and prior.

    ``X`` holds the neighbor values, shape (n, m); the first ordered
    variable passes an (n, 0) matrix and a degenerate prior, which makes
    ``G = I`` and a zero regression function.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n = y.shape[0]
    K = kernel_eval(prior, X)
    G = K + np.eye(n)
    L, jitter = chol_with_jitter(G, label=f"row {index}")
    w = solve_triangular(L, y, lower=True, check_finite=False)
    solve_y = solve_triangular(L.T, w, lower=False, check_finite=False)
    quad = float(w @ w)
    alpha_t = prior.alpha + 0.5 * n
    beta_t = prior.beta + 0.5 * quad
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    term = (
        -0.5 * logdet
        + prior.alpha * np.log(prior.beta)
        - alpha_t * np.log(beta_t)
        + gammaln(alpha_t)
        - gammaln(prior.alpha)
    )
    return FittedRow(
        index=index,
        prior=prior,
        train_x=X,
        chol=L,
        solve_y=solve_y,
        alpha_tilde=alpha_t,
        beta_tilde=beta_t,
        loglik_term=float(term),
        jitter=jitter,
    )


def _prior_scales(ell, hyper):
    """Vectorized per-row scale quantities; raises on degenerate values."""
    ell = np.asarray(ell, dtype=float)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            mean_d2 = np.exp(hyper.theta_d1) * ell**hyper.theta_d2
            if not hyper.nonlinear:
                sig2 = np.zeros_like(ell)
            else:
                sig2 = np.exp(hyper.theta_sigma1) * ell**hyper.theta_sigma2
        except FloatingPointError as exc:
            raise NumericalError(f"hyperparameter scales overflowed: {exc}") from exc
    if not np.all(np.isfinite(mean_d2)) or np.any(mean_d2 <= 0):
        raise NumericalError("noise-scale prior mean is degenerate for some row")
    if not np.all(np.isfinite(sig2)):
        raise NumericalError("kernel variance overflowed for some row")
    beta = mean_d2 * (hyper.alpha - 1.0)
    return sig2, mean_d2, beta


def loglik_terms(Y_ord, ordering, hyper):
    """Per-row marginal log-likelihood terms (constant in shape omitted).

    ``Y_ord`` must already be permuted into the ordering (columns follow
    ``ordering.perm``).  Rows sharing the full neighbor count are
    processed in stacked blocks; the few early rows with fewer
    predecessors go one at a time.
    """
    Y_ord = np.asarray(Y_ord, dtype=float)
    n, N = Y_ord.shape
    if ordering.N != N:
        raise DataError(f"ordering covers {ordering.N} variables, data has {N}")
    alpha = hyper.alpha
    alpha_t = alpha + 0.5 * n
    lg = gammaln(alpha_t) - gammaln(alpha)
    m = hyper.m
    q_full = np.exp(hyper.theta_q * np.arange(1, m + 1))
    sig2, mean_d2, beta = _prior_scales(ordering.ell, hyper)
    gamma = float(np.exp(hyper.theta_gamma))

    terms = np.empty(N, dtype=float)

    def row_term(i, quad):
        beta_t = beta[i] + 0.5 * quad
        return alpha * np.log(beta[i]) - alpha_t * np.log(beta_t) + lg

    # first variable: no regression, G = I
    y0 = Y_ord[:, 0]
    terms[0] = row_term(0, float(y0 @ y0))

    # early rows with fewer predecessors than the full neighbor count
    head = min(max(m, 1), N)
    for i in range(1, head):
        prior = row_prior(hyper, ordering.ell[i], i)
        cols = ordering.neighbors[i][: prior.m]
        fr = fit_row(Y_ord[:, i], Y_ord[:, cols], prior, index=i)
        terms[i] = fr.loglik_term

    if head >= N:
        return terms

    idx = np.arange(head, N)
    cols = np.stack([ordering.neighbors[i][:m] for i in idx]) if m else None
    block = max(1, _BLOCK_ELEMENTS // (n * n))
    eye = np.eye(n)
    for a in range(0, idx.size, block):
        sub = idx[a : a + block]
        yb = Y_ord[:, sub].T  # (B, n)
        if m:
            Xb = Y_ord[:, cols[a : a + block]].transpose(1, 0, 2) * q_full
            cross = np.einsum("bim,bjm->bij", Xb, Xb)
        else:
            cross = np.zeros((sub.size, n, n))
        K = cross
        if hyper.nonlinear:
            nrm = np.einsum("bim,bim->bi", Xb, Xb) if m else np.zeros((sub.size, n))
            d2 = nrm[:, :, None] + nrm[:, None, :] - 2.0 * cross
            np.clip(d2, 0.0, None, out=d2)
            K = cross + sig2[sub, None, None] * matern_corr(np.sqrt(d2) / gamma, hyper.matern_nu)
        G = K / mean_d2[sub, None, None] + eye
        try:
            L = np.linalg.cholesky(G)
            logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
            quad = np.einsum("bn,bn->b", yb, np.linalg.solve(G, yb[:, :, None])[:, :, 0])
        except np.linalg.LinAlgError:
            logdet = np.empty(sub.size)
            quad = np.empty(sub.size)
            for j in range(sub.size):
                Lj, _ = chol_with_jitter(G[j], label=f"row {sub[j]}")
                w = solve_triangular(Lj, yb[j], lower=True, check_finite=False)
                logdet[j] = 2.0 * np.sum(np.log(np.diag(Lj)))
                quad[j] = float(w @ w)
        beta_t = beta[sub] + 0.5 * quad
        if np.any(beta_t <= 0) or not np.all(np.isfinite(beta_t)):
            raise NumericalError("posterior scale became degenerate in a row block")
        terms[sub] = -0.5 * logdet + alpha * np.log(beta[sub]) - alpha_t * np.log(beta_t) + lg
    return terms


def integrated_loglik(Y_ord, ordering, hyper):
    """Marginal log likelihood of ordered data under the row priors.

    Omits the additive constant ``-(N*n/2) log(2*pi)``.  Accumulation is
    plain left-to-right over rows so results do not depend on any
    parallel execution of the surrounding fit.
    """
    terms = loglik_terms(Y_ord, ordering, hyper)
    total = 0.0
    for t in terms:
        total += float(t)
    return total


def _pack(hyper_theta, linear_only):
    t = np.asarray(hyper_theta, dtype=float)
    if t[5] >= 0:
        raise DataError("theta_q must be negative to start the search")
    if linear_only:
        return np.array([t[2], t[3], np.log(-t[5])])
    return np.array([t[0], t[1], t[2], t[3], t[4], np.log(-t[5])])


def _unpack(x, linear_only, config):
    kw = dict(
        g=config.g,
        epsilon=config.epsilon,
        m_max=config.m_max,
        matern_nu=config.matern_nu,
    )
    if linear_only:
        return Hyper(-np.inf, 1.0, x[0], x[1], 0.0, -np.exp(x[2]), linear_only=True, **kw)
    return Hyper(x[0], x[1], x[2], x[3], x[4], -np.exp(x[5]), **kw)


def _default_start(Y_std):
    v = float(np.mean(np.var(Y_std, axis=0, ddof=1)))
    return np.array([np.log(0.1 * v), 1.0, np.log(v), 1.0, 0.0, -0.7])


def fit_map(Y, locs=None, config=None, ordering=None, **overrides):
    """Fit a triangular transport map to replicated fields.

    Parameters
    ----------
    Y : ndarray, shape (n, N)
        Training fields in rows, one column per location.
    locs : ndarray or None
        Locations, used to compute the maximin ordering when
        ``ordering`` is not supplied.
    config : FitConfig or None
    ordering : Ordering or None
        Precomputed ordering; skips the maximin pass.
    **overrides
        Field overrides applied on top of ``config``.

    Returns
    -------
    FittedMap
    """
    config = replace(config or FitConfig(), **overrides)
    Y = as_field_matrix(Y, name="Y")
    n, N = Y.shape
    if ordering is None:
        if locs is None:
            raise DataError("either locs or a precomputed ordering is required")
        ordering = maximin_order(locs, m_max=config.m_max, first=config.first, metric=config.metric)
    if ordering.N != N:
        raise DataError(f"ordering covers {ordering.N} variables, data has {N}")

    if config.standardize:
        if n < 2:
            raise DataError("standardization needs at least 2 replicate fields")
        mean = Y.mean(axis=0)
        sd = Y.std(axis=0, ddof=1)
        zero = np.flatnonzero(sd == 0)
        if zero.size:
            raise DataError(f"column {zero[0]} has zero variance across replicates")
    else:
        mean = np.zeros(N)
        sd = np.ones(N)
    Y_std = (Y - mean) / sd
    Y_ord = Y_std[:, ordering.perm]

    trace = []
    if config.theta is not None and not config.optimize:
        hyper = Hyper.from_theta(
            config.theta,
            g=config.g,
            epsilon=config.epsilon,
            m_max=config.m_max,
            matern_nu=config.matern_nu,
            linear_only=config.linear_only,
        )
    else:
        theta0 = np.asarray(config.theta, dtype=float) if config.theta is not None else None
        if theta0 is None:
            theta0 = _default_start(Y_std)
        x0 = _pack(theta0, config.linear_only)

        def objective(x):
            try:
                h = _unpack(x, config.linear_only, config)
                ll = integrated_loglik(Y_ord, ordering, h)
            except (DataError, NumericalError, FloatingPointError):
                return _PENALTY
            return -ll if np.isfinite(ll) else _PENALTY

        init_val = objective(x0)
        best_x, best_val = x0, init_val
        for r in range(max(1, config.restarts)):
            mag = 0.5 * ((r + 1) // 2)
            offset = mag if r % 2 else -mag
            # restart around the best point found so far: a fresh simplex
            # there escapes the degenerate-simplex stalls a single long
            # Nelder-Mead run is prone to on this likelihood
            start = best_x + offset
            res = minimize(
                objective,
                start,
                method="Nelder-Mead",
                options=dict(
                    fatol=config.fatol,
                    xatol=config.xatol,
                    maxfev=config.maxfev,
                    maxiter=10**7,
                ),
            )
            trace.append(
                dict(
                    restart=r,
                    start=start.tolist(),
                    x=res.x.tolist(),
                    loglik=-float(res.fun),
                    nfev=int(res.nfev),
                    converged=bool(res.success),
                )
            )
            if res.fun < best_val:
                best_val, best_x = float(res.fun), res.x
        if best_val >= init_val:
            warnings.warn(
                "hyperparameter search did not improve on its starting point",
                RuntimeWarning,
                stacklevel=2,
            )
        hyper = _unpack(best_x, config.linear_only, config)

    def build(i):
        prior = row_prior(hyper, ordering.ell[i], i)
        cols = ordering.neighbors[i][: prior.m]
        return fit_row(Y_ord[:, i], Y_ord[:, cols], prior, index=i)

    rows = run_indexed(build, range(N), threads=config.threads)
    return FittedMap(
        ordering=ordering,
        hyper=hyper,
        rows=tuple(rows),
        mean=mean,
        sd=sd,
        simplified=config.simplified,
        trace=tuple(trace),
    )
