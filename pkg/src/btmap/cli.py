"""Command-line surface.

Each subcommand reads and writes the formats documented in FORMATS.md
and prints a single JSON status line on success.  Report subcommands
(order, score, kl, diagnose) also render a PNG figure next to their
delimited output.  Exit codes: 0 success, 1 usage, 2 data error,
3 numerical failure; messages go to standard error.

A ``--config`` file (TOML or JSON, flat keys) can override any numeric
default; explicit command-line flags win over the config file.
"""

import argparse
import json
import sys
from dataclasses import fields as dc_fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dataio import (
    ingest,
    load_chain,
    load_map,
    read_locations,
    read_matrix,
    save_chain,
    save_map,
    write_locations,
    write_matrix,
)
from .dpm import DPMConfig, dpm_gibbs, dpm_logpdf, dpm_sample
from .errors import DataError, NumericalError
from .evaluation import (
    baseline_exp_cov,
    baseline_samp_tap,
    coef_diagnostics,
    kl_estimate,
    log_score,
)
from .fitting import FitConfig, fit_map
from .ordering import maximin_order
from .scenarios import SCENARIOS, make_scenario, scenario_sample
from .transform import conditional_sample, forward, inverse, logpdf, sample

METHODS = ("nonlin", "linear", "S-nonlin", "S-linear", "dpm", "sampTap", "expCov")


def _load_config(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".json"):
        return json.loads(raw.decode())
    try:
        return tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError:
        try:
            return json.loads(raw.decode())
        except ValueError:
            raise DataError(f"{path}: not valid TOML or JSON") from None


def _gather(cfg, cls, args, names):
    """Merge config-file values and explicit CLI flags into kwargs for cls."""
    valid = {f.name for f in dc_fields(cls)}
    kw = {k: v for k, v in cfg.items() if k in valid}
    for name in names:
        val = getattr(args, name, None)
        if val is not None:
            kw[name] = val
    return kw


def _status(**kv):
    print(json.dumps(kv, sort_keys=True))


def _rng(args):
    return np.random.default_rng(args.seed if args.seed is not None else 0)


def _read_fields(path, log_transform=False):
    values = np.atleast_2d(read_matrix(path))
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise DataError(f"{path}: non-finite value at row {bad[0]}, column {bad[1]}")
    if log_transform:
        if np.any(values <= 0):
            raise DataError(f"{path}: log transform needs positive values")
        values = np.log(values)
    return values


def _ordering_inputs(args, cfg):
    """Resolve (locs, metric, ordering-ready distances) for order/fit."""
    metric = args.metric or cfg.get("metric")
    if getattr(args, "distances", None):
        return read_matrix(args.distances), metric or "precomputed"
    if not args.locations:
        raise DataError("either --locations or --distances is required")
    table = read_locations(args.locations)
    return table.coords, metric or table.metric


def _provider(args, cfg):
    """Build (logpdf provider, method label, train n) for score/kl."""
    method = args.method
    if method is not None and method not in METHODS:
        raise DataError(f"--method must be one of {METHODS}")
    if method in (None, "nonlin", "linear", "S-nonlin", "S-linear"):
        if getattr(args, "chain", None) and method is None:
            chain = load_chain(args.chain)
            return (lambda Y: dpm_logpdf(chain, Y)), "dpm", chain.n
        if not args.map:
            raise DataError("--map is required for map-based methods")
        fmap = load_map(args.map)
        if method is not None and fmap.method != method:
            raise DataError(f"map at {args.map} was fitted as {fmap.method!r}, not {method!r}")
        return (lambda Y: logpdf(fmap, Y)), fmap.method, fmap.n
    if method == "dpm":
        if not getattr(args, "chain", None):
            raise DataError("--chain is required for --method dpm")
        chain = load_chain(args.chain)
        return (lambda Y: dpm_logpdf(chain, Y)), "dpm", chain.n
    if not args.train or not args.locations:
        raise DataError(f"--train and --locations are required for --method {method}")
    Y_train = _read_fields(args.train, args.log_transform)
    locs = read_locations(args.locations).coords
    if method == "sampTap":
        ridge = cfg.get("ridge", 1e-6)
        return baseline_samp_tap(Y_train, locs, ridge=ridge), "sampTap", Y_train.shape[0]
    provider = baseline_exp_cov(
        Y_train,
        locs,
        maxfev=cfg.get("baseline_maxfev", 200),
        fatol=cfg.get("baseline_fatol", 1e-4),
    )
    return provider, "expCov", Y_train.shape[0]


def _cmd_order(args, cfg):
    from .figures import fig_ell_decay

    pts, metric = _ordering_inputs(args, cfg)
    ordering = maximin_order(
        pts,
        m_max=args.m_max if args.m_max is not None else cfg.get("m_max", 30),
        first=args.first,
        metric=metric,
    )
    m = max(r.shape[0] for r in ordering.neighbors) if ordering.N > 1 else 0
    nb = np.full((ordering.N, m), -1, dtype=np.int64)
    for i, row in enumerate(ordering.neighbors):
        nb[i, : row.shape[0]] = row
    table = np.column_stack(
        [np.arange(ordering.N), ordering.perm, ordering.ell, nb]
    )
    csv_path = args.out + ".csv"
    header = "rank,index,ell," + ",".join(f"nb{j + 1}" for j in range(m))
    np.savetxt(
        csv_path,
        table,
        delimiter=",",
        header=header.rstrip(","),
        comments="",
        fmt=["%d", "%d", "%.17g"] + ["%d"] * m,
    )
    fig_path = fig_ell_decay(ordering, args.out + ".png")
    _status(command="order", N=ordering.N, metric=metric, csv=csv_path, figure=fig_path)
    return 0


def _cmd_fit(args, cfg):
    rep, _ = ingest((args.data,), log_transform=args.log_transform, standardize=False)
    ordering = None
    locs = None
    if args.distances:
        pts, metric = _ordering_inputs(args, cfg)
        ordering = maximin_order(
            pts,
            m_max=args.m_max if args.m_max is not None else cfg.get("m_max", 30),
            first=args.first,
            metric=metric,
        )
    else:
        locs, metric = _ordering_inputs(args, cfg)
    names = (
        "g",
        "epsilon",
        "m_max",
        "matern_nu",
        "first",
        "restarts",
        "maxfev",
        "fatol",
        "xatol",
        "threads",
    )
    kw = _gather(cfg, FitConfig, args, names)
    kw["metric"] = metric
    kw["linear_only"] = bool(args.linear)
    kw["simplified"] = bool(args.simplified)
    if args.no_standardize:
        kw["standardize"] = False
    if args.theta:
        kw["theta"] = np.array([float(t) for t in args.theta.split(",")])
        kw["optimize"] = False
    config = FitConfig(**kw)
    fmap = fit_map(rep.values, locs=locs, config=config, ordering=ordering)
    save_map(fmap, args.out)
    _status(
        command="fit",
        method=fmap.method,
        loglik=fmap.loglik,
        theta=[float(t) for t in fmap.hyper.theta],
        n=fmap.n,
        N=fmap.N,
        out=args.out,
    )
    return 0


def _cmd_fit_dpm(args, cfg):
    rep, _ = ingest((args.data,), log_transform=args.log_transform, standardize=False)
    names = ("iterations", "burnin", "thin", "g", "epsilon", "m_max", "matern_nu")
    kw = _gather(cfg, DPMConfig, args, names)
    if args.no_update_theta:
        kw["update_theta"] = False
    if args.no_standardize:
        kw["standardize"] = False
    if args.theta0:
        kw["theta0"] = np.array([float(t) for t in args.theta0.split(",")])
    config = DPMConfig(**kw)
    pts, metric = _ordering_inputs(args, cfg)
    ordering = maximin_order(pts, m_max=config.m_max, metric=metric)
    chain = dpm_gibbs(rep.values, ordering=ordering, config=config, rng=_rng(args))
    save_chain(chain, args.out)
    _status(
        command="fit-dpm",
        states=len(chain.states),
        accept_rates=chain.accept_rates,
        n=chain.n,
        N=chain.N,
        out=args.out,
    )
    return 0


def _cmd_transform(args, cfg):
    fmap = load_map(args.map)
    values = _read_fields(args.data, args.log_transform)
    coefs = forward(fmap, values)
    write_matrix(args.out, np.atleast_2d(coefs.z))
    _status(
        command="transform",
        fields=int(np.atleast_2d(coefs.z).shape[0]),
        n_clamped=coefs.n_clamped,
        out=args.out,
    )
    return 0


def _cmd_invert(args, cfg):
    fmap = load_map(args.map)
    z = _read_fields(args.coeffs)
    y = np.atleast_2d(inverse(fmap, z))
    if args.log_transform:
        y = np.exp(y)
    write_matrix(args.out, y)
    _status(command="invert", fields=int(y.shape[0]), out=args.out)
    return 0


def _cmd_sample(args, cfg):
    rng = _rng(args)
    if args.chain:
        chain = load_chain(args.chain)
        y = dpm_sample(chain, rng, count=args.count)
    else:
        if not args.map:
            raise DataError("either --map or --chain is required")
        fmap = load_map(args.map)
        y = np.atleast_2d(sample(fmap, rng, count=args.count))
    if args.log_transform:
        y = np.exp(y)
    write_matrix(args.out, y)
    _status(command="sample", fields=int(y.shape[0]), out=args.out)
    return 0


def _cmd_condsim(args, cfg):
    fmap = load_map(args.map)
    values = _read_fields(args.data, args.log_transform)
    ref = values[args.field]
    y = np.atleast_2d(conditional_sample(fmap, ref, args.k, _rng(args), count=args.count))
    if args.log_transform:
        y = np.exp(y)
    write_matrix(args.out, y)
    _status(command="condsim", k=args.k, fields=int(y.shape[0]), out=args.out)
    return 0


def _cmd_score(args, cfg):
    from .figures import fig_per_field

    provider, label, train_n = _provider(args, cfg)
    test = _read_fields(args.data, args.log_transform)
    report = log_score(provider, test, method=label, n=train_n, seed=args.seed)
    payload = {
        "method": report.method,
        "mean": report.mean,
        "se": report.se,
        "n_fields": report.n_fields,
        "n_excluded": report.n_excluded,
        "n": report.n,
        "N": report.N,
        "seed": report.seed,
    }
    with open(args.out + ".json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    np.savetxt(
        args.out + ".csv",
        np.column_stack([np.arange(report.n_fields), report.per_field]),
        delimiter=",",
        header="field,neg_log_density",
        comments="",
        fmt=["%d", "%.17g"],
    )
    fig = fig_per_field(
        report.per_field, report.mean, report.se, args.out + ".png", "negative log density"
    )
    _status(command="score", figure=fig, out=args.out + ".json", **payload)
    return 0


def _cmd_kl(args, cfg):
    from .figures import fig_per_field

    scen_seed = args.scenario_seed if args.scenario_seed is not None else args.seed
    tm, _ = make_scenario(args.scenario, rng=np.random.default_rng(scen_seed or 0))
    provider, label, _ = _provider(args, cfg)
    test = _read_fields(args.data, args.log_transform)
    report = kl_estimate(tm, provider, test)
    payload = {
        "method": label,
        "scenario": args.scenario,
        "kl": report.value,
        "se": report.se,
        "n_fields": int(report.per_field.size),
        "n_excluded": report.n_excluded,
    }
    with open(args.out + ".json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    np.savetxt(
        args.out + ".csv",
        np.column_stack([np.arange(report.per_field.size), report.per_field]),
        delimiter=",",
        header="field,log_density_gap",
        comments="",
        fmt=["%d", "%.17g"],
    )
    fig = fig_per_field(report.per_field, report.value, report.se, args.out + ".png", "log density gap")
    _status(command="kl", figure=fig, out=args.out + ".json", **payload)
    return 0


def _cmd_simulate(args, cfg):
    rng = _rng(args)
    tm, locs = make_scenario(args.scenario, rng=rng)
    Y = scenario_sample(tm, rng, count=args.n)
    data_path = args.out + ("-data.csv" if args.format == "csv" else "-data.bin")
    write_matrix(data_path, Y, fmt=args.format)
    loc_path = args.out + "-locations.csv"
    write_locations(loc_path, locs)
    _status(
        command="simulate",
        scenario=args.scenario,
        n=args.n,
        N=locs.shape[0],
        data=data_path,
        locations=loc_path,
    )
    return 0


def _cmd_diagnose(args, cfg):
    from .figures import fig_diagnostics

    fmap = load_map(args.map)
    test = _read_fields(args.data, args.log_transform)
    seq = _read_fields(args.sequence, args.log_transform) if args.sequence else None
    diag = coef_diagnostics(fmap, test, field_sequence=seq)
    payload = {
        "pooled_mean": diag.pooled_mean,
        "pooled_var": diag.pooled_var,
        "qq_max_dev": diag.qq_max_dev,
        "n_fields": diag.n_fields,
        "n_clamped": diag.n_clamped,
    }
    with open(args.out + ".json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    cols = [np.arange(diag.coord_mean.shape[0]), diag.coord_mean, diag.coord_var]
    header = "coord,mean,var"
    fmt = ["%d", "%.17g", "%.17g"]
    if diag.lag1 is not None:
        cols.append(diag.lag1)
        header += ",lag1"
        fmt.append("%.17g")
    np.savetxt(
        args.out + ".csv",
        np.column_stack(cols),
        delimiter=",",
        header=header,
        comments="",
        fmt=fmt,
    )
    fig = fig_diagnostics(diag, args.out + ".png")
    _status(command="diagnose", figure=fig, out=args.out + ".json", **payload)
    return 0


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="worker-pool cap")
    common.add_argument("--config", default=None, help="TOML/JSON file of numeric overrides")

    p = argparse.ArgumentParser(prog="btmap", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, parents=[common], **kw)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("order", _cmd_order, help="maximin ordering report")
    sp.add_argument("--locations", help="location CSV (header x,y or lon,lat)")
    sp.add_argument("--distances", help="precomputed distance matrix (binary + sidecar)")
    sp.add_argument("--metric", choices=("euclidean", "chordal", "precomputed"))
    sp.add_argument("--m-max", dest="m_max", type=int)
    sp.add_argument("--first", type=int, help="index of the first ordered point")
    sp.add_argument("--out", required=True, help="output prefix (.csv, .png)")

    for name, fn in (("fit", _cmd_fit), ("fit-dpm", _cmd_fit_dpm)):
        sp = add(name, fn, help=f"{name} on a replicate matrix")
        sp.add_argument("--data", required=True)
        sp.add_argument("--locations")
        sp.add_argument("--distances")
        sp.add_argument("--metric", choices=("euclidean", "chordal", "precomputed"))
        sp.add_argument("--m-max", dest="m_max", type=int)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--g", type=float)
        sp.add_argument("--matern-nu", dest="matern_nu", type=float)
        sp.add_argument("--log-transform", action="store_true")
        sp.add_argument("--no-standardize", action="store_true")
        sp.add_argument("--out", required=True)
        if name == "fit":
            sp.add_argument("--linear", action="store_true", help="drop the nonlinear kernel part")
            sp.add_argument("--simplified", action="store_true", help="Gaussian closed-form variant")
            sp.add_argument("--first", type=int)
            sp.add_argument("--restarts", type=int)
            sp.add_argument("--maxfev", type=int)
            sp.add_argument("--fatol", type=float)
            sp.add_argument("--xatol", type=float)
            sp.add_argument("--theta", help="6 comma-separated values; skips optimization")
        else:
            sp.add_argument("--iterations", type=int)
            sp.add_argument("--burnin", type=int)
            sp.add_argument("--thin", type=int)
            sp.add_argument("--theta0", help="10 comma-separated starting values")
            sp.add_argument("--no-update-theta", action="store_true")

    sp = add("transform", _cmd_transform, help="fields -> coefficients")
    sp.add_argument("--map", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--log-transform", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("invert", _cmd_invert, help="coefficients -> fields")
    sp.add_argument("--map", required=True)
    sp.add_argument("--coeffs", required=True)
    sp.add_argument("--log-transform", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("sample", _cmd_sample, help="unconditional draws")
    sp.add_argument("--map")
    sp.add_argument("--chain")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--log-transform", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("condsim", _cmd_condsim, help="conditional simulation")
    sp.add_argument("--map", required=True)
    sp.add_argument("--data", required=True, help="reference field(s)")
    sp.add_argument("--field", type=int, default=0, help="row of --data to condition on")
    sp.add_argument("--k", type=int, required=True, help="number of pinned coefficients")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--log-transform", action="store_true")
    sp.add_argument("--out", required=True)

    for name, fn in (("score", _cmd_score), ("kl", _cmd_kl)):
        sp = add(name, fn, help=f"{name} report on held-out fields")
        sp.add_argument("--data", required=True, help="held-out fields")
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--map")
        sp.add_argument("--chain")
        sp.add_argument("--train", help="training fields (baseline methods)")
        sp.add_argument("--locations", help="locations (baseline methods)")
        sp.add_argument("--log-transform", action="store_true")
        sp.add_argument("--out", required=True, help="output prefix (.json, .csv, .png)")
        if name == "kl":
            sp.add_argument("--scenario", required=True, choices=SCENARIOS)
            sp.add_argument(
                "--scenario-seed",
                dest="scenario_seed",
                type=int,
                help="seed the scenario was simulated with (NI3600)",
            )

    sp = add("simulate", _cmd_simulate, help="draw fields from a named scenario")
    sp.add_argument("--scenario", required=True, choices=SCENARIOS)
    sp.add_argument("--n", type=int, required=True, help="number of fields")
    sp.add_argument("--format", choices=("csv", "bin"), default="csv")
    sp.add_argument("--out", required=True, help="output prefix")

    sp = add("diagnose", _cmd_diagnose, help="coefficient Gaussianity report")
    sp.add_argument("--map", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--sequence", help="ordered fields for lag-1 autocorrelation")
    sp.add_argument("--log-transform", action="store_true")
    sp.add_argument("--out", required=True, help="output prefix (.json, .csv, .png)")

    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 1
    try:
        cfg = _load_config(args.config)
        return args.fn(args, cfg)
    except DataError as exc:
        print(f"btmap: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"btmap: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"btmap: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
