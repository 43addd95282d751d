"""Maximin ordering of spatial locations and ordered nearest neighbors.

The greedy maximin ordering starts from a central point and repeatedly
appends the unordered point whose distance to the ordered set is
largest.  The resulting sequence is coarse-to-fine: the distance
``ell[i]`` from point ``i`` to its nearest predecessor decays roughly
like ``i**(-1/d)`` in d dimensions, which is what the hyperparameter
length-scale schedules rely on.

Distances are Euclidean by default; ``metric="chordal"`` treats the two
location columns as lon/lat degrees and measures straight-line chords
on the unit sphere; ``metric="precomputed"`` takes a full distance
matrix in place of coordinates.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .util import as_locations

# Scale factor for displaying unit-sphere chord lengths in kilometres.
EARTH_RADIUS_KM = 6371.0

_METRICS = ("euclidean", "chordal", "precomputed")


@dataclass(frozen=True)
class Ordering:
    """A maximin permutation with its scale sequence and neighbor sets.

    Attributes
    ----------
    perm : ndarray of int, shape (N,)
        ``perm[i]`` is the original index of the i-th ordered point.
    ell : ndarray, shape (N,)
        ``ell[0]`` is the domain diameter; for ``i >= 1`` it is the
        distance from ordered point i to its nearest predecessor.
    neighbors : tuple of ndarray
        ``neighbors[i]`` holds ordered positions (all ``< i``) of the
        nearest predecessors of point i, ascending in distance, at most
        ``m_max`` of them.
    metric : str
        One of ``euclidean``, ``chordal``, ``precomputed``.
    """

    perm: np.ndarray
    ell: np.ndarray
    neighbors: tuple
    metric: str = "euclidean"

    @property
    def N(self):
        return self.perm.shape[0]

    @property
    def inverse(self):
        """Positions of the original indices: ``inverse[perm[i]] == i``."""
        return np.argsort(self.perm)

    def validate(self, tol=1e-12):
        """Check the structural invariants; raises DataError on violation."""
        N = self.N
        if sorted(self.perm.tolist()) != list(range(N)):
            raise DataError("perm is not a permutation of 0..N-1")
        if np.any(np.diff(self.ell[1:]) > tol * max(1.0, float(self.ell[0]))):
            raise DataError("ell must be non-increasing after the first entry")
        for i, nb in enumerate(self.neighbors):
            if nb.size and (nb.min() < 0 or nb.max() >= i):
                raise DataError(f"neighbors[{i}] refers outside the first {i} positions")


def _prepare_points(locs, metric):
    if metric == "precomputed":
        D = np.asarray(locs, dtype=float)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise DataError(f"precomputed metric needs a square distance matrix, got {D.shape}")
        if not np.all(np.isfinite(D)):
            raise DataError("distance matrix contains non-finite values")
        if not np.allclose(D, D.T, atol=1e-10):
            raise DataError("distance matrix is not symmetric")
        if np.any(np.abs(np.diag(D)) > 1e-10) or np.any(D < -1e-10):
            raise DataError("distance matrix must be nonnegative with a zero diagonal")
        return None, D
    pts = as_locations(locs)
    if metric == "chordal":
        if pts.shape[1] != 2:
            raise DataError("chordal metric expects two columns: lon, lat in degrees")
        if np.any(np.abs(pts[:, 0]) > 180.0) or np.any(np.abs(pts[:, 1]) > 90.0):
            raise DataError("chordal metric needs lon in [-180, 180] and lat in [-90, 90]")
        lon = np.radians(pts[:, 0])
        lat = np.radians(pts[:, 1])
        pts = np.column_stack(
            [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)]
        )
    return pts, None


def _dist_to_all(pts, D, j):
    if D is not None:
        return D[j].copy()
    diff = pts - pts[j]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _diameter(pts, D):
    if D is not None:
        return float(D.max())
    # blocked pairwise max keeps memory flat for large N
    best = 0.0
    step = 512
    for a in range(0, pts.shape[0], step):
        blk = pts[a : a + step]
        d2 = (
            np.sum(blk * blk, axis=1)[:, None]
            + np.sum(pts * pts, axis=1)[None, :]
            - 2.0 * blk @ pts.T
        )
        best = max(best, float(d2.max()))
    return float(np.sqrt(max(best, 0.0)))


def _central_index(pts, D):
    if D is not None:
        # medoid: the point minimizing total distance to the rest
        return int(np.argmin(D.sum(axis=1)))
    center = pts.mean(axis=0)
    diff = pts - center
    return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))


def maximin_order(locs, m_max=30, first=None, metric="euclidean"):
    """Greedy maximin ordering with nearest-predecessor neighbor sets.

    Parameters
    ----------
    locs : ndarray
        Coordinates, shape (N, d); for ``metric="precomputed"`` a full
        (N, N) distance matrix instead.
    m_max : int
        Cap on the number of stored neighbors per point.
    first : int or None
        Original index of the starting point.  Defaults to the point
        nearest the coordinate centroid (the medoid for precomputed
        distances).
    metric : str

    Notes
    -----
    Ties in the greedy argmax are broken toward the lowest original
    index, so the ordering is fully deterministic.
    """
    if metric not in _METRICS:
        raise DataError(f"unknown metric {metric!r}; expected one of {_METRICS}")
    pts, D = _prepare_points(locs, metric)
    N = D.shape[0] if D is not None else pts.shape[0]
    if first is None:
        start = _central_index(pts, D)
    else:
        start = int(first)
        if not 0 <= start < N:
            raise DataError(f"first={first} outside 0..{N - 1}")

    perm = np.empty(N, dtype=np.int64)
    ell = np.empty(N, dtype=float)
    perm[0] = start
    ell[0] = _diameter(pts, D)
    dmin = _dist_to_all(pts, D, start)
    dmin[start] = -np.inf
    for i in range(1, N):
        j = int(np.argmax(dmin))  # first occurrence wins ties
        if dmin[j] <= 0.0:
            raise DataError(
                f"duplicate locations (index {j}): zero maximin distance degenerates ell"
            )
        perm[i] = j
        ell[i] = dmin[j]
        row = _dist_to_all(pts, D, j)
        np.minimum(dmin, row, out=dmin)
        dmin[j] = -np.inf

    neighbors = nearest_neighbors(perm, locs, m_max, metric=metric)
    return Ordering(perm=perm, ell=ell, neighbors=neighbors, metric=metric)


def correlation_distance(Y, corr_range, locs):
    """Correlation-based distance matrix for ordering by statistical proximity.

    The sample covariance of the replicates is tapered elementwise by an
    exponential correlation of the given range, renormalized to a
    correlation matrix R, and converted to ``D = sqrt(1 - |R|)``.  The
    result can be fed back into :func:`maximin_order` with
    ``metric="precomputed"`` when geometry alone is a poor guide to
    dependence.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise DataError("need at least 2 replicate rows to estimate correlation")
    if corr_range <= 0:
        raise DataError(f"corr_range must be positive, got {corr_range}")
    pts, _ = _prepare_points(locs, "euclidean")
    if pts.shape[0] != Y.shape[1]:
        raise DataError("locations and replicate columns disagree")
    sd = Y.std(axis=0, ddof=1)
    zero = np.flatnonzero(sd == 0)
    if zero.size:
        raise DataError(f"column {zero[0]} has zero variance across replicates")
    S = np.cov(Y, rowvar=False)
    d2 = (
        np.sum(pts * pts, axis=1)[:, None]
        + np.sum(pts * pts, axis=1)[None, :]
        - 2.0 * pts @ pts.T
    )
    np.clip(d2, 0.0, None, out=d2)
    T = S * np.exp(-np.sqrt(d2) / corr_range)
    diag = np.sqrt(np.diag(T))
    R = T / np.outer(diag, diag)
    D = np.sqrt(np.clip(1.0 - np.abs(R), 0.0, None))
    np.fill_diagonal(D, 0.0)
    return 0.5 * (D + D.T)


def nearest_neighbors(perm, locs, m_max=30, metric="euclidean"):
    """Nearest previously ordered points for each position of ``perm``.

    Returns a tuple of int arrays; entry i lists ordered positions
    ``< i`` sorted by ascending distance to ordered point i, at most
    ``m_max`` of them.  Exact distance ties keep the lower position
    first (stable sort).
    """
    if m_max < 1:
        raise DataError(f"m_max must be at least 1, got {m_max}")
    perm = np.asarray(perm, dtype=np.int64)
    pts, D = _prepare_points(locs, metric)
    out = [np.empty(0, dtype=np.int64)]
    for i in range(1, perm.shape[0]):
        row = _dist_to_all(pts, D, perm[i])
        d_prev = row[perm[:i]]
        order = np.argsort(d_prev, kind="stable")
        out.append(order[: min(m_max, i)].astype(np.int64))
    return tuple(out)
