"""Dirichlet-process-mixture residual model with a Metropolis-within-Gibbs sampler.

This extends the triangular map beyond Gaussian residuals.  Per ordered
variable i the model is

    y_i = f_i + eps_i,  f_i ~ GP(0, C_i),
    eps_ij ~ N(mu_{c_j}, d2_{c_j}),  (mu_k, d2_k) ~ NIG(0, eta_i, alpha_i, beta_i),
    c_j ~ CRP(zeta_i),

where C_i is the unscaled row kernel (the noise scale no longer divides
it) and the cluster parameters follow a Dirichlet-process mixture with a
normal-inverse-gamma base measure.  Each sweep of the sampler

1. redraws the latent residuals ``eps_i ~ N(mean, D - D G^{-1} D)`` with
   ``G = C + D`` (done by Matheron's rule using a cached Cholesky of C),
2. reassigns cluster labels one observation at a time from the collapsed
   Chinese-restaurant conditional with Student-t predictive weights,
3. redraws cluster parameters from their NIG full conditionals, and
4. updates the 10-vector theta by random-walk Metropolis in three blocks
   matching the factorization of its posterior: the CRP term (theta_zeta),
   the GP term (theta_sigma, theta_gamma, theta_q), and the NIG term
   (theta_d, theta_eta).

Proposal scales adapt toward a 0.3 acceptance rate during burn-in and
are frozen afterwards.  Thinned post-burn-in states carry everything the
mixture posterior predictive needs, including one fresh draw from the
NIG base per row so the predictive's new-cluster component is fixed at
snapshot time.
"""

from dataclasses import dataclass, field, replace
from math import exp, lgamma, log, log1p, pi, sqrt

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, logsumexp

from .errors import DataError, NumericalError
from .kernels import Hyper, kernel_eval, row_prior, sparsity_m
from .ordering import maximin_order
from .stats import norm_logpdf
from .util import as_field_matrix, chol_with_jitter

_LOG_2PI = float(np.log(2.0 * np.pi))

# theta layout: indices of the three Metropolis blocks
BLOCK_ZETA = (6, 7)
BLOCK_KERNEL = (0, 1, 4, 5)
BLOCK_SCALE = (2, 3, 8, 9)


@dataclass(frozen=True)
class DPMHyper:
    """The 10-vector theta with per-row derived quantities.

    Entries 0..5 play the same roles as in the base model (kernel
    variance, noise-scale mean, range, relevance decay); 6..7 set the
    per-row DP concentration ``zeta_i`` and 8..9 the NIG precision
    ``eta_i``, all as ``exp(theta_1) * ell_i**theta_2`` schedules.  The
    NIG location ``xi`` is fixed at zero.
    """

    theta: np.ndarray
    g: float = 4.0
    epsilon: float = 0.01
    m_max: int = 30
    matern_nu: float = 1.5

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if th.shape != (10,):
            raise DataError(f"theta must have 10 entries, got shape {th.shape}")
        if not np.all(np.isfinite(th[1:])) or np.isnan(th[0]) or th[0] == np.inf:
            raise DataError("theta entries must be finite (theta[0] may be -inf)")
        object.__setattr__(self, "theta", th)

    @property
    def alpha(self):
        return 2.0 + 1.0 / self.g**2

    def hyper6(self):
        """The kernel-facing six-parameter view of theta."""
        return Hyper.from_theta(
            self.theta[:6],
            g=self.g,
            epsilon=self.epsilon,
            m_max=self.m_max,
            matern_nu=self.matern_nu,
        )

    def _schedule(self, log_base, power, ell):
        # overflow to inf is caught by the degenerate-schedule checks
        with np.errstate(over="ignore"):
            return np.exp(log_base) * np.asarray(ell, dtype=float) ** power

    def zeta(self, ell):
        return self._schedule(self.theta[6], self.theta[7], ell)

    def eta(self, ell):
        return self._schedule(self.theta[8], self.theta[9], ell)

    def mean_d2(self, ell):
        return self._schedule(self.theta[2], self.theta[3], ell)

    def beta(self, ell):
        return self.mean_d2(ell) * (self.alpha - 1.0)


@dataclass
class DPMConfig:
    """Chain length, proposal tuning, and base-measure settings."""

    iterations: int = 5000
    burnin: int = 2000
    thin: int = 10
    update_theta: bool = True
    adapt: bool = True
    target_accept: float = 0.3
    prop_scales: tuple = (0.25, 0.25, 0.25)
    jitter: float = 1e-8
    beta_floor: float = 1e-12
    standardize: bool = True
    theta0: object = None
    g: float = 4.0
    epsilon: float = 0.01
    m_max: int = 30
    matern_nu: float = 1.5


@dataclass(frozen=True)
class DPMState:
    """One thinned posterior snapshot.

    ``mu``/``d2`` are per-row arrays of cluster parameters aligned with
    the contiguous labels; ``fresh_mu``/``fresh_d2`` hold one draw from
    the NIG base per row, used as the predictive's new-cluster
    component.
    """

    iteration: int
    theta: np.ndarray
    eps: np.ndarray
    labels: np.ndarray
    mu: tuple
    d2: tuple
    fresh_mu: np.ndarray
    fresh_d2: np.ndarray


@dataclass(frozen=True)
class DPMChain:
    """Thinned DPM posterior with the context needed to apply it."""

    ordering: object
    mean: np.ndarray
    sd: np.ndarray
    Y_ord: np.ndarray
    states: tuple
    g: float = 4.0
    epsilon: float = 0.01
    m_max: int = 30
    matern_nu: float = 1.5
    accept_rates: dict = field(default_factory=dict, compare=False)
    config: dict = field(default_factory=dict, compare=False)

    @property
    def N(self):
        return self.Y_ord.shape[1]

    @property
    def n(self):
        return self.Y_ord.shape[0]

    def hyper(self, theta):
        return DPMHyper(
            theta=np.asarray(theta, dtype=float),
            g=self.g,
            epsilon=self.epsilon,
            m_max=self.m_max,
            matern_nu=self.matern_nu,
        )


def _default_theta0():
    return np.array([np.log(0.1), 1.0, 0.0, 1.0, 0.0, -0.7, 0.0, 0.0, 0.0, 0.0])


class _Clusters:
    """Mutable per-row cluster bookkeeping with contiguous labels.

    Starts from all-singleton labels: merging is the fast direction for
    the collapsed sweep, so coalescence finds multimodal structure that
    a one-cluster start never splits out of (the scale schedule locks
    onto the broad single-cluster widths and then forbids tight ones).
    """

    __slots__ = ("labels", "count", "sumx", "sumx2", "K")

    def __init__(self, n):
        self.labels = np.arange(n, dtype=np.int64)
        self.count = np.ones(n, dtype=np.int64)
        self.sumx = np.zeros(n)
        self.sumx2 = np.zeros(n)
        self.K = n

    def refresh(self, eps):
        """Recompute sufficient statistics after eps changed."""
        K = self.K
        self.sumx[:K] = np.bincount(self.labels, weights=eps, minlength=K)[:K]
        self.sumx2[:K] = np.bincount(self.labels, weights=eps * eps, minlength=K)[:K]

    def remove(self, j, x):
        k = self.labels[j]
        self.count[k] -= 1
        self.sumx[k] -= x
        self.sumx2[k] -= x * x
        if self.count[k] == 0:
            last = self.K - 1
            if k != last:
                self.count[k] = self.count[last]
                self.sumx[k] = self.sumx[last]
                self.sumx2[k] = self.sumx2[last]
                self.labels[self.labels == last] = k
            self.count[last] = 0
            self.sumx[last] = 0.0
            self.sumx2[last] = 0.0
            self.K = last

    def insert(self, j, x, k):
        if k == self.K:
            self.K += 1
        self.labels[j] = k
        self.count[k] += 1
        self.sumx[k] += x
        self.sumx2[k] += x * x


def _label_sweep(eps, cl, zeta, eta, alpha, beta, beta_floor, lgA, lgA5, rng):
    """Collapsed CRP label resampling for one row (Gibbs step 2).

    Weights follow the leave-one-out NIG posterior predictive, a
    Student-t with ``2*alpha_tilde`` degrees of freedom; ``lgA[s]`` and
    ``lgA5[s]`` cache ``lgamma(alpha + s/2)`` and the same shifted by
    one half, the only special-function values the loop needs.
    """
    n = eps.shape[0]
    logzeta = log(zeta)
    # new-cluster predictive constants (prior case, s = 0)
    scale0 = sqrt(beta * (eta + 1.0) / (alpha * eta))
    df0 = 2.0 * alpha
    c0 = lgA5[0] - lgA[0] - 0.5 * log(df0 * pi) - log(scale0)
    for j in range(n):
        x = float(eps[j])
        cl.remove(j, x)
        K = cl.K
        best = -np.inf
        logw = [0.0] * (K + 1)
        for k in range(K):
            s = int(cl.count[k])
            sx = cl.sumx[k]
            etat = eta + s
            alphat = alpha + 0.5 * s
            xit = sx / etat
            xbar = sx / s
            ss = cl.sumx2[k] - s * xbar * xbar
            if ss < 0.0:
                ss = 0.0
            betat = beta + 0.5 * ss + 0.5 * s * eta * xbar * xbar / etat
            if betat < beta_floor:
                betat = beta_floor
            scale = sqrt(betat * (etat + 1.0) / (alphat * etat))
            df = 2.0 * alphat
            u = (x - xit) / scale
            lw = (
                log(s)
                + lgA5[s]
                - lgA[s]
                - 0.5 * log(df * pi)
                - log(scale)
                - (alphat + 0.5) * log1p(u * u / df)
            )
            logw[k] = lw
            if lw > best:
                best = lw
        u0 = x / scale0
        lw = logzeta + c0 - (alpha + 0.5) * log1p(u0 * u0 / df0)
        logw[K] = lw
        if lw > best:
            best = lw
        total = 0.0
        for k in range(K + 1):
            w = exp(logw[k] - best)
            logw[k] = w
            total += w
        target = rng.random() * total
        acc = 0.0
        choice = K
        for k in range(K + 1):
            acc += logw[k]
            if target <= acc:
                choice = k
                break
        cl.insert(j, x, choice)


def nig_posterior(s, sumx, sumx2, eta, alpha, beta, beta_floor=0.0):
    """Normal-inverse-gamma posterior given sufficient statistics.

    Parameters
    ----------
    s : int
        Number of observations in the cluster.
    sumx, sumx2 : float
        Sum and sum of squares of the observations.
    eta, alpha, beta : float
        Prior precision scale and inverse-gamma shape/rate.

    Returns
    -------
    tuple of float
        Updated ``(eta, alpha, xi, beta)``.
    """
    etat = eta + s
    alphat = alpha + 0.5 * s
    xit = sumx / etat
    xbar = sumx / s
    ss = max(sumx2 - s * xbar * xbar, 0.0)
    betat = max(beta + 0.5 * ss + 0.5 * s * eta * xbar * xbar / etat, beta_floor)
    return etat, alphat, xit, betat


def _draw_cluster_params(cl, eta, alpha, beta, beta_floor, rng):
    """NIG full-conditional draws for one row (Gibbs step 3)."""
    K = cl.K
    mu = np.empty(K)
    d2 = np.empty(K)
    for k in range(K):
        etat, alphat, xit, betat = nig_posterior(
            int(cl.count[k]), cl.sumx[k], cl.sumx2[k], eta, alpha, beta, beta_floor
        )
        d2_k = betat / rng.standard_gamma(alphat)
        mu[k] = xit + sqrt(d2_k / etat) * rng.standard_normal()
        d2[k] = d2_k
    return mu, d2


class _KernelCache:
    """Per-row C kernels and Cholesky factors for a given theta[0..5]."""

    def __init__(self, Y_ord, ordering, jitter):
        self.Y_ord = Y_ord
        self.ordering = ordering
        self.jitter = jitter
        self.key = None
        self.X = None
        self.C = None
        self.chol = None
        self.logdet = None

    def update(self, hyper6):
        key = hyper6.theta.tobytes()
        if key == self.key:
            return
        n, N = self.Y_ord.shape
        X, C, chol, logdet = [None], [None], [None], [0.0]
        for i in range(1, N):
            prior = row_prior(hyper6, self.ordering.ell[i], i)
            cols = self.ordering.neighbors[i][: prior.m]
            Xi = self.Y_ord[:, cols]
            Ci = kernel_eval(prior, Xi, scaled=False)
            base = float(np.mean(np.diag(Ci)))
            Ci = Ci + self.jitter * (base if base > 0 else 1.0) * np.eye(n)
            Li, _ = chol_with_jitter(Ci, label=f"row {i} kernel")
            X.append(Xi)
            C.append(Ci)
            chol.append(Li)
            logdet.append(2.0 * float(np.sum(np.log(np.diag(Li)))))
        self.key, self.X, self.C, self.chol, self.logdet = key, X, C, chol, logdet

    def gp_loglik(self, F):
        """Sum over rows >= 1 of log N(F[i] | 0, C_i)."""
        n = self.Y_ord.shape[0]
        total = 0.0
        for i in range(1, self.Y_ord.shape[1]):
            w = solve_triangular(self.chol[i], F[i], lower=True, check_finite=False)
            total += -0.5 * (n * _LOG_2PI + self.logdet[i] + float(w @ w))
        return total


def dpm_gibbs(Y, ordering=None, config=None, rng=None, locs=None, **overrides):
    """Run the Metropolis-within-Gibbs sampler and return a thinned chain.

    ``Y`` is the (n, N) replicate matrix in original units; it is
    standardized per column (unless disabled) and permuted into the
    ordering, which is computed from ``locs`` when not supplied.
    """
    config = replace(config or DPMConfig(), **overrides)
    if rng is None:
        raise DataError("an rng is required")
    if config.iterations <= config.burnin:
        raise DataError("iterations must exceed burnin")
    Y = as_field_matrix(Y, name="Y")
    n, N = Y.shape
    if ordering is None:
        if locs is None:
            raise DataError("either locs or a precomputed ordering is required")
        ordering = maximin_order(locs, m_max=config.m_max)
    if ordering.N != N:
        raise DataError(f"ordering covers {ordering.N} variables, data has {N}")
    if config.standardize:
        if n < 2:
            raise DataError("standardization needs at least 2 replicate fields")
        mean = Y.mean(axis=0)
        sd = Y.std(axis=0, ddof=1)
        if np.any(sd == 0):
            raise DataError("a column has zero variance across replicates")
    else:
        mean = np.zeros(N)
        sd = np.ones(N)
    Y_ord = ((Y - mean) / sd)[:, ordering.perm]

    theta = np.array(config.theta0 if config.theta0 is not None else _default_theta0(), dtype=float)
    hyper = DPMHyper(
        theta=theta,
        g=config.g,
        epsilon=config.epsilon,
        m_max=config.m_max,
        matern_nu=config.matern_nu,
    )
    alpha = hyper.alpha
    ell = ordering.ell
    zeta_arr = hyper.zeta(ell)
    eta_arr = hyper.eta(ell)
    beta_arr = hyper.beta(ell)
    if np.any(~np.isfinite(zeta_arr)) or np.any(zeta_arr <= 0):
        raise DataError("zeta schedule is degenerate for this theta")
    if np.any(~np.isfinite(eta_arr)) or np.any(eta_arr <= 0):
        raise DataError("eta schedule is degenerate for this theta")

    # lgamma(alpha + s/2) and lgamma(alpha + s/2 + 1/2) for s = 0..n
    s_grid = np.arange(n + 1)
    lgA = gammaln(alpha + 0.5 * s_grid)
    lgA5 = gammaln(alpha + 0.5 * s_grid + 0.5)

    cache = _KernelCache(Y_ord, ordering, config.jitter)
    cache.update(hyper.hyper6())

    eps = Y_ord.T.copy()  # (N, n); row 0 stays equal to the data
    clusters = [_Clusters(n) for _ in range(N)]
    mu = [np.zeros(n) for _ in range(N)]
    d2 = [np.full(n, hyper.mean_d2(ell[i])) for i in range(N)]
    for i in range(N):
        clusters[i].refresh(eps[i])

    blocks = (BLOCK_ZETA, BLOCK_KERNEL, BLOCK_SCALE)
    scales = list(config.prop_scales)
    prop_counts = [0, 0, 0]
    kept_acc = [0, 0, 0]
    kept_prop = [0, 0, 0]

    def target_zeta(z_arr):
        K_arr = np.array([cl.K for cl in clusters], dtype=float)
        return float(np.sum(K_arr * np.log(z_arr) + gammaln(z_arr) - gammaln(z_arr + n)))

    def target_scale(e_arr, b_arr):
        total = 0.0
        mus = np.concatenate([mu[i] for i in range(N)])
        d2s = np.concatenate([d2[i] for i in range(N)])
        rows = np.concatenate([np.full(mu[i].shape[0], i) for i in range(N)])
        e = e_arr[rows]
        b = b_arr[rows]
        total += float(
            np.sum(0.5 * np.log(e) - 0.5 * np.log(2.0 * np.pi * d2s) - e * mus**2 / (2.0 * d2s))
        )
        total += float(
            np.sum(alpha * np.log(b) - gammaln(alpha) - (alpha + 1.0) * np.log(d2s) - b / d2s)
        )
        return total

    states = []
    for sweep in range(1, config.iterations + 1):
        # -- step 1: latent residuals given clusters (Matheron draw)
        for i in range(1, N):
            dvec = d2[i][clusters[i].labels]
            muvec = mu[i][clusters[i].labels]
            C = cache.C[i]
            G = C.copy()
            G[np.arange(n), np.arange(n)] += dvec
            try:
                LG = np.linalg.cholesky(G)
            except np.linalg.LinAlgError:
                raise NumericalError(f"residual covariance not positive definite at row {i}")
            f0 = cache.chol[i] @ rng.standard_normal(n)
            e0 = np.sqrt(dvec) * rng.standard_normal(n)
            r = Y_ord[:, i] - muvec - f0 - e0
            w = solve_triangular(LG, r, lower=True, check_finite=False)
            w = solve_triangular(LG.T, w, lower=False, check_finite=False)
            eps[i] = Y_ord[:, i] - f0 - C @ w
            clusters[i].refresh(eps[i])

        # -- step 2: collapsed label resampling
        for i in range(N):
            _label_sweep(
                eps[i],
                clusters[i],
                float(zeta_arr[i]),
                float(eta_arr[i]),
                alpha,
                float(beta_arr[i]),
                config.beta_floor,
                lgA,
                lgA5,
                rng,
            )

        # -- step 3: cluster parameters
        for i in range(N):
            mu[i], d2[i] = _draw_cluster_params(
                clusters[i],
                float(eta_arr[i]),
                alpha,
                float(beta_arr[i]),
                config.beta_floor,
                rng,
            )

        # -- step 4: Metropolis on theta in three blocks
        if config.update_theta:
            for b, idx in enumerate(blocks):
                prop_counts[b] += 1
                prop = theta.copy()
                prop[list(idx)] += scales[b] * rng.standard_normal(len(idx))
                accepted = False
                try:
                    hyper_prop = DPMHyper(
                        theta=prop,
                        g=config.g,
                        epsilon=config.epsilon,
                        m_max=config.m_max,
                        matern_nu=config.matern_nu,
                    )
                    if idx == BLOCK_ZETA:
                        z_new = hyper_prop.zeta(ell)
                        if np.all(np.isfinite(z_new)) and np.all(z_new > 0):
                            delta = target_zeta(z_new) - target_zeta(zeta_arr)
                            if log(rng.random()) < delta:
                                zeta_arr = z_new
                                accepted = True
                    elif idx == BLOCK_KERNEL:
                        F = Y_ord.T - eps
                        old = cache.gp_loglik(F)
                        prop_cache = _KernelCache(Y_ord, ordering, config.jitter)
                        prop_cache.update(hyper_prop.hyper6())
                        new = prop_cache.gp_loglik(F)
                        if np.isfinite(new) and log(rng.random()) < new - old:
                            cache = prop_cache
                            accepted = True
                    else:
                        e_new = hyper_prop.eta(ell)
                        b_new = hyper_prop.beta(ell)
                        ok = (
                            np.all(np.isfinite(e_new))
                            and np.all(e_new > 0)
                            and np.all(np.isfinite(b_new))
                            and np.all(b_new > 0)
                        )
                        if ok:
                            delta = target_scale(e_new, b_new) - target_scale(eta_arr, beta_arr)
                            if log(rng.random()) < delta:
                                eta_arr, beta_arr = e_new, b_new
                                accepted = True
                except (DataError, NumericalError, FloatingPointError, OverflowError):
                    accepted = False
                else:
                    if accepted:
                        theta = prop
                if sweep <= config.burnin:
                    if config.adapt:
                        step = prop_counts[b] ** -0.6
                        scales[b] *= exp(step * ((1.0 if accepted else 0.0) - config.target_accept))
                else:
                    kept_prop[b] += 1
                    kept_acc[b] += 1 if accepted else 0

        # -- record
        if sweep > config.burnin and (sweep - config.burnin - 1) % config.thin == 0:
            fresh_d2 = beta_arr / rng.standard_gamma(alpha, size=N)
            fresh_mu = np.sqrt(fresh_d2 / eta_arr) * rng.standard_normal(N)
            states.append(
                DPMState(
                    iteration=sweep,
                    theta=theta.copy(),
                    eps=eps.copy(),
                    labels=np.stack([cl.labels.copy() for cl in clusters]),
                    mu=tuple(mu[i].copy() for i in range(N)),
                    d2=tuple(d2[i].copy() for i in range(N)),
                    fresh_mu=fresh_mu,
                    fresh_d2=fresh_d2,
                )
            )

    rates = {
        name: (kept_acc[b] / kept_prop[b]) if kept_prop[b] else float("nan")
        for b, name in enumerate(("zeta", "kernel", "scale"))
    }
    return DPMChain(
        ordering=ordering,
        mean=mean,
        sd=sd,
        Y_ord=Y_ord,
        states=tuple(states),
        g=config.g,
        epsilon=config.epsilon,
        m_max=config.m_max,
        matern_nu=config.matern_nu,
        accept_rates=rates,
        config=dict(
            iterations=config.iterations,
            burnin=config.burnin,
            thin=config.thin,
            update_theta=config.update_theta,
            prop_scales=tuple(scales),
        ),
    )


def _state_row_groups(chain, i):
    """Group state indices by their active neighbor count at row i."""
    groups = {}
    for l, st in enumerate(chain.states):
        m = min(sparsity_m(st.theta[5], chain.epsilon, chain.m_max), i)
        groups.setdefault(m, []).append(l)
    return groups


def _row_predict(chain, i, xstar, state_ids, m):
    """GP predictive (fhat, v) of row i for each state in one m-group.

    Returns arrays of shape (L, k).  Row 0 has no GP: zeros.
    """
    n = chain.n
    k = xstar.shape[0]
    L = len(state_ids)
    fhat = np.zeros((L, k))
    v = np.zeros((L, k))
    if i == 0:
        return fhat, v
    cols = chain.ordering.neighbors[i][:m]
    X = chain.Y_ord[:, cols]
    for a, l in enumerate(state_ids):
        st = chain.states[l]
        prior = row_prior(chain.hyper(st.theta).hyper6(), chain.ordering.ell[i], i)
        C = kernel_eval(prior, X, scaled=False)
        base = float(np.mean(np.diag(C)))
        C = C + 1e-8 * (base if base > 0 else 1.0) * np.eye(n)
        dvec = st.d2[i][st.labels[i]]
        muvec = st.mu[i][st.labels[i]]
        G = C.copy()
        G[np.arange(n), np.arange(n)] += dvec
        LG, _ = chol_with_jitter(G, label=f"row {i} predictive")
        Cs = kernel_eval(prior, xstar, X, scaled=False)  # (k, n)
        us = xstar * prior.q
        diag = np.einsum("ij,ij->i", us, us) + prior.sigma2
        rhs = np.concatenate([(chain.Y_ord[:, i] - muvec)[:, None], Cs.T], axis=1)
        w = solve_triangular(LG, rhs, lower=True, check_finite=False)
        w = solve_triangular(LG.T, w, lower=False, check_finite=False)
        fhat[a] = Cs @ w[:, 0]
        v[a] = np.clip(diag - np.einsum("kn,nk->k", Cs, w[:, 1:]), 0.0, None)
    return fhat, v


def _mixture_logpdf(chain, i, state_ids, fhat, v, yvals, out):
    """Add each state's mixture log density of row i into ``out`` (S, k)."""
    n = chain.n
    ell_i = chain.ordering.ell[i]
    for a, l in enumerate(state_ids):
        st = chain.states[l]
        zeta = float(chain.hyper(st.theta).zeta(np.array([ell_i]))[0])
        counts = np.bincount(st.labels[i], minlength=st.mu[i].shape[0]).astype(float)
        mus = np.concatenate([st.mu[i], [st.fresh_mu[i]]])
        d2s = np.concatenate([st.d2[i], [st.fresh_d2[i]]])
        logw = np.log(np.concatenate([counts, [zeta]]) / (n + zeta))
        means = fhat[a][None, :] + mus[:, None]
        vars_ = v[a][None, :] + d2s[:, None]
        comp = logw[:, None] + norm_logpdf(yvals[None, :], means, vars_)
        out[l] += logsumexp(comp, axis=0)


def dpm_logpdf(chain, y):
    """Posterior predictive log density under the DPM chain (original units).

    Averages the per-state mixture densities over the thinned states;
    each state contributes a product over rows of Gaussian mixtures with
    weights ``n_k / (n + zeta_i)`` plus a fresh-cluster component.
    """
    if not chain.states:
        raise DataError("chain has no recorded states")
    single = np.asarray(y).ndim == 1
    y = as_field_matrix(y, N=chain.N, name="fields")
    y_ord = ((y - chain.mean) / chain.sd)[:, chain.ordering.perm]
    k = y_ord.shape[0]
    S = len(chain.states)
    total = np.zeros((S, k))
    for i in range(chain.N):
        yvals = y_ord[:, i]
        groups = _state_row_groups(chain, i)
        for m, state_ids in sorted(groups.items()):
            cols = chain.ordering.neighbors[i][:m]
            fhat, v = _row_predict(chain, i, y_ord[:, cols], state_ids, m)
            _mixture_logpdf(chain, i, state_ids, fhat, v, yvals, total)
    out = logsumexp(total, axis=0) - np.log(S) - np.sum(np.log(chain.sd))
    return float(out[0]) if single else out


def dpm_sample(chain, rng, count=1):
    """Ancestral draws from the chain's posterior predictive, (count, N)."""
    if not chain.states:
        raise DataError("chain has no recorded states")
    S = len(chain.states)
    n = chain.n
    pick = rng.integers(0, S, size=count)
    y_ord = np.empty((count, chain.N))
    for i in range(chain.N):
        for l in np.unique(pick):
            sel = np.flatnonzero(pick == l)
            st = chain.states[l]
            m = min(sparsity_m(st.theta[5], chain.epsilon, chain.m_max), i)
            cols = chain.ordering.neighbors[i][:m]
            fhat, v = _row_predict(chain, i, y_ord[np.ix_(sel, cols)], [l], m)
            zeta = float(chain.hyper(st.theta).zeta(np.array([chain.ordering.ell[i]]))[0])
            counts = np.bincount(st.labels[i], minlength=st.mu[i].shape[0]).astype(float)
            probs = np.concatenate([counts, [zeta]]) / (n + zeta)
            mus = np.concatenate([st.mu[i], [st.fresh_mu[i]]])
            d2s = np.concatenate([st.d2[i], [st.fresh_d2[i]]])
            comp = np.searchsorted(np.cumsum(probs), rng.random(sel.size) * probs.sum())
            comp = np.clip(comp, 0, mus.size - 1)
            mean_ = fhat[0] + mus[comp]
            var_ = v[0] + d2s[comp]
            y_ord[sel, i] = mean_ + np.sqrt(var_) * rng.standard_normal(sel.size)
    y = y_ord[:, chain.ordering.inverse] * chain.sd + chain.mean
    return y
