"""Row-wise covariance kernels and their conjugate scale priors.

Each ordered variable i gets a regression on its ``m_i`` nearest
predecessors with prior covariance

    C_i(x, x') = (q * x) . (q * x') + sigma_i^2 * rho(||q * (x - x')|| / gamma),

a linear part plus a Matern correlation of the weighted inputs.  The
relevance weights ``q_k = exp(theta_q * k)`` decay geometrically in
neighbor rank k, and the number of active neighbors m_i is where the
weights fall below a floor ``epsilon``.  Applying the same weights
inside the Matern distance keeps ``rho`` a true correlation
(``rho(x, x) = 1``) while still shrinking the influence of far
neighbors in both kernel components.

The noise scale of row i has an inverse-gamma prior with mean
``exp(theta_d1) * ell_i**theta_d2`` and shape tied to a signal-to-noise
factor g, and the kernel used by the conjugate regression is
``K_i = C_i / E[d_i^2]``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError

MATERN_NUS = (0.5, 1.5, 2.5)

# Field order of the packed hyperparameter vector.
THETA_NAMES = ("sigma1", "sigma2", "d1", "d2", "gamma", "q")


@dataclass(frozen=True)
class Hyper:
    """Global hyperparameters shared by every row of the map.

    ``theta_sigma1 = -inf`` switches the nonlinear kernel component off
    entirely, leaving a linear (Gaussian) map.
    """

    theta_sigma1: float
    theta_sigma2: float
    theta_d1: float
    theta_d2: float
    theta_gamma: float
    theta_q: float
    g: float = 4.0
    epsilon: float = 0.01
    m_max: int = 30
    matern_nu: float = 1.5
    linear_only: bool = False

    def __post_init__(self):
        vals = (self.theta_sigma2, self.theta_d1, self.theta_d2, self.theta_gamma, self.theta_q)
        if not all(np.isfinite(v) for v in vals):
            raise DataError("hyperparameters other than theta_sigma1 must be finite")
        if np.isnan(self.theta_sigma1) or self.theta_sigma1 == np.inf:
            raise DataError("theta_sigma1 must be finite or -inf")
        if self.g <= 0 or not (0.0 < self.epsilon < 1.0) or self.m_max < 1:
            raise DataError("need g > 0, 0 < epsilon < 1, m_max >= 1")
        if self.matern_nu not in MATERN_NUS:
            raise DataError(f"matern_nu must be one of {MATERN_NUS}")

    @classmethod
    def from_theta(cls, theta, **kw):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (6,):
            raise DataError(f"theta must have 6 entries, got shape {theta.shape}")
        return cls(*theta.tolist(), **kw)

    @property
    def theta(self):
        return np.array(
            [
                self.theta_sigma1,
                self.theta_sigma2,
                self.theta_d1,
                self.theta_d2,
                self.theta_gamma,
                self.theta_q,
            ]
        )

    @property
    def alpha(self):
        """Inverse-gamma shape, 2 + 1/g^2: finite mean and variance."""
        return 2.0 + 1.0 / self.g**2

    @property
    def m(self):
        """Active neighbor count implied by the relevance decay."""
        return sparsity_m(self.theta_q, self.epsilon, self.m_max)

    @property
    def nonlinear(self):
        return not self.linear_only and self.theta_sigma1 != -np.inf


def sparsity_m(theta_q, epsilon, m_max=30):
    """Largest k with ``exp(theta_q * k) >= epsilon``, capped at m_max.

    Nonnegative ``theta_q`` never decays below the floor, so the cap
    applies.  The boundary is resolved by direct evaluation to avoid
    off-by-one from the log division.
    """
    if theta_q >= 0.0:
        return int(m_max)
    m = int(np.floor(np.log(epsilon) / theta_q))
    while m > 0 and np.exp(theta_q * m) < epsilon:
        m -= 1
    while np.exp(theta_q * (m + 1)) >= epsilon:
        m += 1
    return max(0, min(int(m_max), m))


@dataclass(frozen=True)
class RowPrior:
    """Evaluated prior for one row: kernel constants and scale prior.

    ``q`` has length ``m`` (possibly zero).  ``sigma2 == 0`` disables
    the nonlinear component; the first ordered variable always has
    ``sigma2 == 0`` and ``m == 0`` so that its conditional mean is
    identically zero.
    """

    sigma2: float
    gamma: float
    q: np.ndarray
    alpha: float
    beta: float
    mean_d2: float
    matern_nu: float = 1.5

    @property
    def m(self):
        return self.q.shape[0]


def row_prior(hyper, ell_i, index):
    """Instantiate the prior for the row at 0-based ordered position ``index``.

    ``ell_i`` is the maximin scale of that position (the domain diameter
    for index 0).  The neighbor count is clipped to the number of
    predecessors, and position 0 carries a degenerate kernel (zero) so
    only its scale prior is active.
    """
    ell_i = float(ell_i)
    if not np.isfinite(ell_i) or ell_i < 0:
        raise DataError(f"ell must be finite and nonnegative, got {ell_i}")
    mean_d2 = float(np.exp(hyper.theta_d1) * ell_i**hyper.theta_d2)
    if not np.isfinite(mean_d2) or mean_d2 <= 0:
        raise DataError(f"noise-scale prior mean is {mean_d2} at ell={ell_i}")
    alpha = hyper.alpha
    beta = mean_d2 * (alpha - 1.0)
    m = min(hyper.m, index)
    if index == 0 or hyper.linear_only:
        sigma2 = 0.0
    else:
        sigma2 = float(np.exp(hyper.theta_sigma1) * ell_i**hyper.theta_sigma2)
    q = np.exp(hyper.theta_q * np.arange(1, m + 1))
    return RowPrior(
        sigma2=sigma2,
        gamma=float(np.exp(hyper.theta_gamma)),
        q=q,
        alpha=alpha,
        beta=beta,
        mean_d2=mean_d2,
        matern_nu=hyper.matern_nu,
    )


def matern_corr(t, nu=1.5):
    """Matern correlation at scaled distance ``t >= 0`` for half-integer nu."""
    t = np.asarray(t, dtype=float)
    # polynomial * exp(-s) is an inf * 0 form at t = inf; the limit is 0
    with np.errstate(invalid="ignore"):
        if nu == 0.5:
            out = np.exp(-t)
        elif nu == 1.5:
            s = np.sqrt(3.0) * t
            out = (1.0 + s) * np.exp(-s)
        elif nu == 2.5:
            s = np.sqrt(5.0) * t
            out = (1.0 + s + s * s / 3.0) * np.exp(-s)
        else:
            raise DataError(f"matern_nu must be one of {MATERN_NUS}")
    return np.where(t == np.inf, 0.0, out) if np.any(~np.isfinite(t)) else out


def kernel_eval(prior, X, X2=None, scaled=True):
    """Kernel matrix between covariate sets under a row prior.

    Parameters
    ----------
    prior : RowPrior
    X : ndarray, shape (a, m)
    X2 : ndarray or None
        Second covariate set, shape (b, m); defaults to ``X``.
    scaled : bool
        When true (the conjugate-regression convention) the raw kernel
        is divided by the prior mean of the row's noise scale.

    Returns
    -------
    ndarray, shape (a, b)
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != prior.m:
        raise DataError(f"covariates have shape {X.shape}, prior expects {prior.m} columns")
    sym = X2 is None
    # overflow on extreme covariates propagates as inf/nan entries and
    # surfaces downstream as a non-finite density, so don't warn here
    with np.errstate(invalid="ignore", over="ignore"):
        U = X * prior.q
        V = U if sym else np.asarray(X2, dtype=float) * prior.q
        cross = U @ V.T
        K = cross
        if prior.sigma2 > 0.0:
            nu = np.einsum("ij,ij->i", U, U)
            nv = nu if sym else np.einsum("ij,ij->i", V, V)
            d2 = nu[:, None] + nv[None, :] - 2.0 * cross
            np.clip(d2, 0.0, None, out=d2)
            K = K + prior.sigma2 * matern_corr(np.sqrt(d2) / prior.gamma, prior.matern_nu)
        if scaled:
            K = K / prior.mean_d2
    return K
