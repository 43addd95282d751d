"""Data ingestion and bit-exact serialization of fitted objects.

Two tiny container formats hold fitted state (documented in detail in
FORMATS.md at the repository root):

* ``BTM1``    a fitted triangular map,
* ``BTMDPM1`` a thinned DPM chain.

Both are: magic bytes, a little-endian uint64 header length, a
canonical JSON header (sorted keys, no whitespace) whose ``arrays``
manifest lists (name, dtype, shape) in payload order, then the raw
C-order little-endian array bytes concatenated.  Canonical JSON plus
raw array bytes make save -> load -> save byte-identical, which the
determinism checks rely on.

Replicate matrices travel either as CSV (header row optional) or as raw
little-endian float64 row-major binary next to a JSON sidecar
``<path>.json`` holding ``{"n": rows, "N": cols}``.  The same binary
format serves for precomputed distance matrices.  Location tables are
CSV with a header (``x,y`` or ``lon,lat``; the latter selects the
chordal metric).
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .dpm import DPMChain, DPMState
from .errors import DataError
from .fitting import FittedMap, FittedRow
from .kernels import Hyper, row_prior
from .ordering import Ordering

MAP_MAGIC = b"BTM1"
CHAIN_MAGIC = b"BTMDPM1"
MAP_VERSION = 1
CHAIN_VERSION = 1

_DTYPES = {"f8": "<f8", "i8": "<i8"}


@dataclass(frozen=True)
class Locations:
    """Spatial coordinates with the metric implied by their header."""

    coords: np.ndarray
    columns: tuple
    metric: str = "euclidean"

    @property
    def N(self):
        return self.coords.shape[0]


@dataclass(frozen=True)
class ReplicateMatrix:
    """An (n, N) replicate matrix with its preprocessing record."""

    values: np.ndarray
    source: str = ""
    log_transform: bool = False
    standardized: bool = False
    mean: np.ndarray = None
    sd: np.ndarray = None

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    def original(self):
        """Undo standardization (identity when it was not applied)."""
        if not self.standardized:
            return self.values.copy()
        return self.values * self.sd + self.mean


def read_locations(path):
    """Read a location CSV (header ``x,y`` or ``lon,lat``, arbitrary dim)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise DataError(f"{path}: empty locations file")
        columns = tuple(c.strip() for c in header.split(","))
        try:
            coords = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: could not parse locations: {exc}") from None
    if coords.shape[1] != len(columns):
        raise DataError(f"{path}: header has {len(columns)} names, rows have {coords.shape[1]}")
    if not np.all(np.isfinite(coords)):
        raise DataError(f"{path}: locations contain non-finite values")
    lowered = tuple(c.lower() for c in columns)
    metric = "chordal" if lowered[:2] in (("lon", "lat"), ("longitude", "latitude")) else "euclidean"
    return Locations(coords=coords, columns=columns, metric=metric)


def write_locations(path, coords, columns=None):
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if columns is None:
        columns = ("x", "y", "z", "w")[: coords.shape[1]]
    np.savetxt(path, coords, delimiter=",", header=",".join(columns), comments="")


def _looks_like_header(line):
    for tok in line.strip().split(","):
        try:
            float(tok)
        except ValueError:
            return True
    return False


def read_matrix(path):
    """Read a matrix from CSV or from LE float64 binary with a sidecar."""
    if str(path).endswith(".csv"):
        with open(path) as fh:
            first = fh.readline()
            if not first.strip():
                raise DataError(f"{path}: empty file")
            skip = 1 if _looks_like_header(first) else 0
            fh.seek(0)
            try:
                return np.loadtxt(fh, delimiter=",", skiprows=skip, ndmin=2)
            except ValueError as exc:
                raise DataError(f"{path}: could not parse matrix: {exc}") from None
    sidecar = str(path) + ".json"
    if not os.path.exists(sidecar):
        raise DataError(f"{sidecar}: missing binary sidecar with {{'n', 'N'}}")
    with open(sidecar) as fh:
        try:
            meta = json.load(fh)
            n, N = int(meta["n"]), int(meta["N"])
        except (ValueError, KeyError) as exc:
            raise DataError(f"{sidecar}: bad sidecar: {exc}") from None
    raw = np.fromfile(path, dtype="<f8")
    if raw.size != n * N:
        raise DataError(f"{path}: expected {n * N} float64 values, found {raw.size}")
    return raw.reshape(n, N)


def write_matrix(path, values, fmt=None, header=None):
    """Write a matrix as CSV or LE float64 binary (+ sidecar)."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "bin"
    if fmt == "csv":
        kw = {"header": header, "comments": ""} if header else {}
        np.savetxt(path, values, delimiter=",", **kw)
    elif fmt == "bin":
        np.ascontiguousarray(values, dtype="<f8").tofile(path)
        with open(str(path) + ".json", "w") as fh:
            json.dump({"n": values.shape[0], "N": values.shape[1]}, fh, sort_keys=True)
            fh.write("\n")
    else:
        raise DataError(f"unknown matrix format {fmt!r}")


def ingest(paths, log_transform=False, standardize=True):
    """Load replicates (and optionally locations) and preprocess them.

    ``paths`` is a replicate-matrix path or a (replicates, locations)
    pair.  The optional elementwise log comes first, then per-column
    standardization with the (mean, sd) stored on the result.
    """
    if isinstance(paths, (str, os.PathLike)):
        data_path, loc_path = paths, None
    else:
        seq = list(paths)
        data_path = seq[0]
        loc_path = seq[1] if len(seq) > 1 else None
    values = read_matrix(data_path)
    if values.shape[0] < 2:
        raise DataError(f"{data_path}: need at least 2 replicates, found {values.shape[0]}")
    if np.any(np.isnan(values)) or np.any(np.isinf(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise DataError(f"{data_path}: non-finite value at row {bad[0]}, column {bad[1]}")
    if log_transform:
        if np.any(values <= 0):
            bad = np.argwhere(values <= 0)[0]
            raise DataError(
                f"{data_path}: log transform needs positive values; "
                f"row {bad[0]}, column {bad[1]} is {values[bad[0], bad[1]]}"
            )
        values = np.log(values)
    sd_all = values.std(axis=0, ddof=1)
    if np.any(sd_all == 0):
        col = int(np.flatnonzero(sd_all == 0)[0])
        raise DataError(f"{data_path}: column {col} is constant across replicates")
    if standardize:
        mean = values.mean(axis=0)
        sd = sd_all
        values = (values - mean) / sd
    else:
        mean = np.zeros(values.shape[1])
        sd = np.ones(values.shape[1])
    rep = ReplicateMatrix(
        values=values,
        source=str(data_path),
        log_transform=log_transform,
        standardized=standardize,
        mean=mean,
        sd=sd,
    )
    locs = read_locations(loc_path) if loc_path is not None else None
    return rep, locs


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_json_safe(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _write_container(path, magic, meta, arrays):
    """magic | uint64 header length | canonical JSON header | raw arrays."""
    manifest = []
    blobs = []
    for name, arr, kind in arrays:
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[kind])
        manifest.append([name, kind, list(arr.shape)])
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"arrays": manifest, "meta": _json_safe(meta)},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _read_container(path, magic, version, what):
    with open(path, "rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise DataError(f"{path}: not a {what} file (magic {got!r})")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise DataError(f"{path}: truncated header length")
        header_len = int(np.frombuffer(raw_len, dtype="<u8")[0])
        raw = fh.read(header_len)
        if len(raw) != header_len:
            raise DataError(f"{path}: truncated header")
        try:
            header = json.loads(raw.decode())
        except ValueError as exc:
            raise DataError(f"{path}: corrupt header: {exc}") from None
        meta = header.get("meta", {})
        found = int(meta.get("version", -1))
        if found > version:
            raise DataError(
                f"{path}: written by a newer format version ({found} > {version})"
            )
        if found < 1:
            raise DataError(f"{path}: corrupt header: bad version {found}")
        arrays = {}
        for name, kind, shape in header["arrays"]:
            if kind not in _DTYPES:
                raise DataError(f"{path}: unknown dtype tag {kind!r}")
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = count * 8
            blob = fh.read(nbytes)
            if len(blob) != nbytes:
                raise DataError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(blob, dtype=_DTYPES[kind]).reshape(shape).copy()
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after last array")
    return meta, arrays


def _ordering_arrays(ordering, m_max):
    N = ordering.N
    nb = np.full((N, m_max), -1, dtype=np.int64)
    for i, row in enumerate(ordering.neighbors):
        nb[i, : row.shape[0]] = row
    return [
        ("perm", ordering.perm, "i8"),
        ("ell", ordering.ell, "f8"),
        ("neighbors", nb, "i8"),
    ]


def _ordering_from_arrays(arrays, metric):
    nb = arrays["neighbors"]
    neighbors = tuple(row[row >= 0].astype(np.int64) for row in nb)
    return Ordering(
        perm=arrays["perm"].astype(np.int64),
        ell=arrays["ell"],
        neighbors=neighbors,
        metric=metric,
    )


def save_map(fmap, path):
    """Serialize a fitted map; the roundtrip is bit-exact."""
    rows = fmap.rows
    N, n = fmap.N, fmap.n
    mstar = max(r.prior.m for r in rows)
    train_x = np.zeros((N, n, mstar))
    chol = np.zeros((N, n, n))
    solve_y = np.zeros((N, n))
    beta_tilde = np.zeros(N)
    jitter = np.zeros(N)
    terms = np.zeros(N)
    for i, r in enumerate(rows):
        train_x[i, :, : r.prior.m] = r.train_x
        chol[i] = r.chol
        solve_y[i] = r.solve_y
        beta_tilde[i] = r.beta_tilde
        jitter[i] = r.jitter
        terms[i] = r.loglik_term
    meta = {
        "version": MAP_VERSION,
        "N": N,
        "n": n,
        "alpha_tilde": float(rows[0].alpha_tilde),
        "theta": list(fmap.hyper.theta),
        "g": fmap.hyper.g,
        "epsilon": fmap.hyper.epsilon,
        "m_max": fmap.hyper.m_max,
        "matern_nu": fmap.hyper.matern_nu,
        "linear_only": bool(fmap.hyper.linear_only),
        "simplified": bool(fmap.simplified),
        "metric": fmap.ordering.metric,
        "trace": list(fmap.trace),
    }
    arrays = _ordering_arrays(fmap.ordering, fmap.hyper.m_max)
    arrays += [
        ("mean", fmap.mean, "f8"),
        ("sd", fmap.sd, "f8"),
        ("loglik_terms", terms, "f8"),
        ("beta_tilde", beta_tilde, "f8"),
        ("jitter", jitter, "f8"),
        ("train_x", train_x, "f8"),
        ("chol", chol, "f8"),
        ("solve_y", solve_y, "f8"),
    ]
    _write_container(path, MAP_MAGIC, meta, arrays)


def load_map(path):
    meta, arrays = _read_container(path, MAP_MAGIC, MAP_VERSION, "fitted-map")
    hyper = Hyper.from_theta(
        np.array(meta["theta"], dtype=float),
        g=meta["g"],
        epsilon=meta["epsilon"],
        m_max=int(meta["m_max"]),
        matern_nu=meta["matern_nu"],
        linear_only=bool(meta["linear_only"]),
    )
    ordering = _ordering_from_arrays(arrays, meta["metric"])
    N, n = int(meta["N"]), int(meta["n"])
    alpha_tilde = float(meta["alpha_tilde"])
    rows = []
    for i in range(N):
        prior = row_prior(hyper, ordering.ell[i], i)
        rows.append(
            FittedRow(
                index=i,
                prior=prior,
                train_x=arrays["train_x"][i, :, : prior.m].copy(),
                chol=arrays["chol"][i],
                solve_y=arrays["solve_y"][i],
                alpha_tilde=alpha_tilde,
                beta_tilde=float(arrays["beta_tilde"][i]),
                loglik_term=float(arrays["loglik_terms"][i]),
                jitter=float(arrays["jitter"][i]),
            )
        )
    trace = tuple(meta.get("trace", []))
    return FittedMap(
        ordering=ordering,
        hyper=hyper,
        rows=tuple(rows),
        mean=arrays["mean"],
        sd=arrays["sd"],
        simplified=bool(meta["simplified"]),
        trace=trace,
    )


def save_chain(chain, path):
    """Serialize a DPM chain; ragged cluster arrays are flattened."""
    states = chain.states
    S, N, n = len(states), chain.N, chain.n
    K = np.zeros((S, N), dtype=np.int64)
    mu_parts = []
    d2_parts = []
    for s, st in enumerate(states):
        for i in range(N):
            K[s, i] = st.mu[i].shape[0]
            mu_parts.append(st.mu[i])
            d2_parts.append(st.d2[i])
    meta = {
        "version": CHAIN_VERSION,
        "N": N,
        "n": n,
        "S": S,
        "g": chain.g,
        "epsilon": chain.epsilon,
        "m_max": chain.m_max,
        "matern_nu": chain.matern_nu,
        "metric": chain.ordering.metric,
        "accept_rates": chain.accept_rates,
        "config": chain.config,
    }
    arrays = _ordering_arrays(chain.ordering, chain.m_max)
    arrays += [
        ("mean", chain.mean, "f8"),
        ("sd", chain.sd, "f8"),
        ("Y_ord", chain.Y_ord, "f8"),
        ("iterations", np.array([st.iteration for st in states], dtype=np.int64), "i8"),
        ("theta", np.stack([st.theta for st in states]) if S else np.zeros((0, 10)), "f8"),
        ("eps", np.stack([st.eps for st in states]) if S else np.zeros((0, N, n)), "f8"),
        ("labels", np.stack([st.labels for st in states]) if S else np.zeros((0, N, n)), "i8"),
        ("fresh_mu", np.stack([st.fresh_mu for st in states]) if S else np.zeros((0, N)), "f8"),
        ("fresh_d2", np.stack([st.fresh_d2 for st in states]) if S else np.zeros((0, N)), "f8"),
        ("K", K, "i8"),
        ("mu_flat", np.concatenate(mu_parts) if mu_parts else np.zeros(0), "f8"),
        ("d2_flat", np.concatenate(d2_parts) if d2_parts else np.zeros(0), "f8"),
    ]
    _write_container(path, CHAIN_MAGIC, meta, arrays)


def load_chain(path):
    meta, arrays = _read_container(path, CHAIN_MAGIC, CHAIN_VERSION, "dpm-chain")
    ordering = _ordering_from_arrays(arrays, meta["metric"])
    S, N = int(meta["S"]), int(meta["N"])
    K = arrays["K"]
    sizes = K.reshape(-1)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if arrays["mu_flat"].size != offsets[-1]:
        raise DataError(f"{path}: cluster-parameter arrays do not match counts")
    states = []
    for s in range(S):
        mu = []
        d2 = []
        for i in range(N):
            a, b = offsets[s * N + i], offsets[s * N + i + 1]
            mu.append(arrays["mu_flat"][a:b])
            d2.append(arrays["d2_flat"][a:b])
        states.append(
            DPMState(
                iteration=int(arrays["iterations"][s]),
                theta=arrays["theta"][s],
                eps=arrays["eps"][s],
                labels=arrays["labels"][s],
                mu=tuple(mu),
                d2=tuple(d2),
                fresh_mu=arrays["fresh_mu"][s],
                fresh_d2=arrays["fresh_d2"][s],
            )
        )
    return DPMChain(
        ordering=ordering,
        mean=arrays["mean"],
        sd=arrays["sd"],
        Y_ord=arrays["Y_ord"],
        states=tuple(states),
        g=meta["g"],
        epsilon=meta["epsilon"],
        m_max=int(meta["m_max"]),
        matern_nu=meta["matern_nu"],
        accept_rates=meta.get("accept_rates", {}),
        config=meta.get("config", {}),
    )
