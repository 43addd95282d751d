"""Synthetic ground-truth models for benchmarking map estimation.

All scenarios share one construction: a Gaussian process with unit
variance and exponential covariance ``exp(-h / 0.3)`` is turned into a
triangular model by regressing each maximin-ordered variable on its 30
nearest ordered predecessors.  That yields exact per-row coefficients
``b_i`` and conditional standard deviations ``d_i``, so the resulting
model has a closed-form density and cheap exact sampling.

Variants:

- ``linear``: the pure conditional-Gaussian model on a 30x30 grid
  (LR900) or on 3600 uniformly random locations (NI3600).
- ``sine``: adds ``2 * sin(4 * (b_1 y_(1) + b_2 y_(2)))`` to each
  conditional mean, a nonlinearity in the two nearest neighbors
  (NR900).
- ``sine-bimodal``: the sine mean with residuals drawn from an equal
  mixture of Gaussians centered at -3.5 d_i and +3.5 d_i (NR900B).
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .errors import DataError
from .ordering import maximin_order
from .stats import norm_logpdf
from .util import as_field_matrix, as_locations

KINDS = ("linear", "sine", "sine-bimodal")

SCENARIOS = ("LR900", "NR900", "NR900B", "NI3600")


@dataclass(frozen=True)
class TrueMap:
    """Ground-truth triangular model with exact density.

    ``coef[i]`` holds the linear weights of ordered position i on its
    neighbor values (empty for i = 0); ``d[i]`` the conditional standard
    deviation.  Sine rows add ``sine_amp * sin(sine_freq * w)`` with
    ``w`` the weighted sum of the two nearest neighbors; bimodal rows
    replace the Gaussian residual with an equal two-component mixture
    offset by ``bimodal_shift * d[i]``.
    """

    ordering: object
    coef: tuple
    d: np.ndarray
    kind: str = "linear"
    sine_amp: float = 2.0
    sine_freq: float = 4.0
    bimodal_shift: float = 3.5
    cov_range: float = 0.3

    @property
    def N(self):
        return self.ordering.N

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"kind must be one of {KINDS}, got {self.kind!r}")


def build_true_map(locs, kind="linear", cov_range=0.3, m_max=30, ordering=None):
    """Derive per-row coefficients from the exponential-covariance GP.

    For each ordered position the exact conditional regression on its
    (at most ``m_max``) nearest ordered predecessors is computed from
    the dense covariance blocks; with unit marginal variance this gives
    ``b = S_nn^{-1} s_ni`` and ``d_i^2 = 1 - s_ni' b``.
    """
    locs = as_locations(locs)
    if ordering is None:
        ordering = maximin_order(locs, m_max=m_max)
    pts = locs[ordering.perm]
    N = pts.shape[0]
    coef = [np.empty(0)]
    d = np.empty(N)
    d[0] = 1.0
    for i in range(1, N):
        nb = ordering.neighbors[i][: min(m_max, i)]
        sub = pts[nb]
        Snn = np.exp(-cdist(sub, sub) / cov_range)
        sni = np.exp(-cdist(sub, pts[i : i + 1]) / cov_range)[:, 0]
        b = cho_solve(cho_factor(Snn, lower=True), sni)
        var = 1.0 - float(sni @ b)
        if var <= 0:
            raise DataError(f"conditional variance nonpositive at ordered position {i}")
        coef.append(b)
        d[i] = np.sqrt(var)
    return TrueMap(ordering=ordering, coef=tuple(coef), d=d, kind=kind, cov_range=cov_range)


def make_scenario(name, rng=None):
    """Instantiate a named benchmark scenario.

    Returns ``(true_map, locations)``.  Grid scenarios are fully
    deterministic; NI3600 draws its locations from ``rng``.
    """
    key = str(name).upper()
    if key not in SCENARIOS:
        raise DataError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")
    if key == "NI3600":
        if rng is None:
            raise DataError("NI3600 needs an rng for its random locations")
        locs = rng.uniform(0.0, 1.0, size=(3600, 2))
        kind = "linear"
    else:
        xs = np.linspace(0.0, 1.0, 30)
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        locs = np.column_stack([gx.ravel(), gy.ravel()])
        kind = {"LR900": "linear", "NR900": "sine", "NR900B": "sine-bimodal"}[key]
    return build_true_map(locs, kind=kind), locs


def _row_mean(tm, i, X):
    """Conditional mean of ordered position i given neighbor values X (k, m)."""
    b = tm.coef[i]
    if b.size == 0:
        return np.zeros(X.shape[0])
    f = X @ b
    if tm.kind != "linear":
        w = X[:, :2] @ b[:2] if b.size >= 2 else X[:, 0] * b[0]
        f = f + tm.sine_amp * np.sin(tm.sine_freq * w)
    return f


def scenario_sample(tm, rng, count=1):
    """Ancestral draws from the true model, shape (count, N), original order."""
    N = tm.N
    y_ord = np.empty((count, N))
    for i in range(N):
        nb = tm.ordering.neighbors[i][: tm.coef[i].size]
        f = _row_mean(tm, i, y_ord[:, nb])
        eps = tm.d[i] * rng.standard_normal(count)
        if tm.kind == "sine-bimodal":
            sign = 2.0 * rng.integers(0, 2, size=count) - 1.0
            eps = eps + sign * tm.bimodal_shift * tm.d[i]
        y_ord[:, i] = f + eps
    return y_ord[:, tm.ordering.inverse]


def true_logpdf(tm, y):
    """Exact log density of fields under the true model (original order)."""
    single = np.asarray(y).ndim == 1
    y = as_field_matrix(y, N=tm.N, name="fields")
    y_ord = y[:, tm.ordering.perm]
    total = np.zeros(y.shape[0])
    for i in range(tm.N):
        nb = tm.ordering.neighbors[i][: tm.coef[i].size]
        f = _row_mean(tm, i, y_ord[:, nb])
        var = tm.d[i] ** 2
        if tm.kind == "sine-bimodal":
            off = tm.bimodal_shift * tm.d[i]
            lo = norm_logpdf(y_ord[:, i], f - off, var)
            hi = norm_logpdf(y_ord[:, i], f + off, var)
            total += np.logaddexp(lo, hi) - np.log(2.0)
        else:
            total += norm_logpdf(y_ord[:, i], f, var)
    return float(total[0]) if single else total
