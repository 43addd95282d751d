"""Shared numerical utilities: factorization policy, threading, validation."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import DataError, NumericalError

# Relative size of the first diagonal nudge tried when a factorization
# fails, and how many doublings are attempted before giving up.
JITTER_REL = 1e-8
JITTER_TRIES = 6


def chol_with_jitter(mat, label="matrix"):
    """Lower Cholesky factor of ``mat``, nudging the diagonal on failure.

    The first attempt uses the matrix as given.  On failure a jitter of
    ``JITTER_REL * mean(diag)`` is added and doubled up to
    ``JITTER_TRIES`` times before raising :class:`NumericalError`.

    Returns
    -------
    chol : ndarray
    jitter : float
        The diagonal nudge that succeeded (0.0 for the clean attempt).
    """
    mat = np.asarray(mat, dtype=float)
    try:
        return np.linalg.cholesky(mat), 0.0
    except np.linalg.LinAlgError:
        pass
    base = JITTER_REL * float(np.mean(np.diag(mat)))
    if not np.isfinite(base) or base <= 0.0:
        base = JITTER_REL
    eye = np.eye(mat.shape[0])
    jitter = base
    for _ in range(JITTER_TRIES):
        try:
            return np.linalg.cholesky(mat + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise NumericalError(
        f"Cholesky factorization failed for {label} even with jitter up to {jitter:.3e}"
    )


def run_indexed(fn, items, threads=1):
    """Apply ``fn`` to each item, preserving order in the result list.

    With ``threads > 1`` the work runs on a thread pool but results are
    still collected by index, so the output is identical to the serial
    path regardless of scheduling.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def as_locations(locs):
    """Validate a locations array: finite, 2-d, no duplicate rows."""
    locs = np.asarray(locs, dtype=float)
    if locs.ndim != 2 or locs.shape[0] == 0:
        raise DataError(f"locations must be a nonempty 2-d array, got shape {locs.shape}")
    if not np.all(np.isfinite(locs)):
        raise DataError("locations contain non-finite values")
    uniq = np.unique(locs, axis=0)
    if uniq.shape[0] != locs.shape[0]:
        raise DataError("locations contain duplicate points")
    return locs


def as_field_matrix(Y, N=None, name="Y"):
    """Validate a replicate matrix with fields in rows, variables in columns."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.ndim != 2:
        raise DataError(f"{name} must be 1-d or 2-d, got shape {Y.shape}")
    if N is not None and Y.shape[1] != N:
        raise DataError(f"{name} has {Y.shape[1]} columns, expected {N}")
    if not np.all(np.isfinite(Y)):
        raise DataError(f"{name} contains non-finite values")
    return Y
