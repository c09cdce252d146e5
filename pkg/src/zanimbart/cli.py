"""Command-line interface: fit, simulate, diagnose and pdp.

Exit codes are 0 on success, 1 on invalid input and 2 on numeric failure.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import diagnostics as D
from . import io
from .sampler import LEVELS, VARIANTS, ModelConfig, NumericFailure, run_mcmc
from .simgen import Scenario1Config, Scenario2Config, gen_scenario1, gen_scenario2

# CLI spellings of ModelConfig fields
ALIASES = {"model": "variant", "iters": "iterations", "burnin": "burn_in",
           "trees_theta": "m_theta", "trees_zeta": "m_zeta"}


class UsageError(ValueError):
    pass


def _convert(name, value, default):
    if isinstance(default, bool):
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got '{value}'")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or default is None:
            return float(value)
    except ValueError:
        raise UsageError(f"{name}: cannot parse '{value}'") from None
    return value


def build_config(args):
    """Defaults, then the config file, then explicit flags."""
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    base = ModelConfig()
    values = {}
    if args.config:
        for k, v in io.read_config_file(args.config).items():
            k = ALIASES.get(k, k)
            if k not in fields or k == "factor":
                raise UsageError(f"{args.config}: unknown key '{k}'")
            values[k] = _convert(k, v, getattr(base, k))
    flags = {"variant": args.model, "iterations": args.iters, "burn_in": args.burnin,
             "thin": args.thin, "seed": args.seed, "m_theta": args.trees_theta,
             "m_zeta": args.trees_zeta, "n_jobs": args.n_jobs}
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.sparse_splits:
        values["sparse_splits"] = True
    if args.snapshot_trees:
        values["snapshot_trees"] = True
    try:
        return ModelConfig(**values).validate()
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_fit(args):
    config = build_config(args)
    data = io.load_data(args.counts, args.covariates)
    started = io.now()
    draws = run_mcmc(data.Y, data.X, config)
    io.write_draws(args.out, draws, config, data, started,
                   {"counts_path": os.path.abspath(args.counts),
                    "covariates_path": os.path.abspath(args.covariates)})
    print(f"wrote {draws.n_kept} kept iterations to {args.out}")


def cmd_simulate(args):
    rng = np.random.default_rng(args.seed)
    if args.scenario == 1:
        sim = gen_scenario1(Scenario1Config(n=args.n or 400), rng)
    else:
        sim = gen_scenario2(Scenario2Config(n=args.n or 100), rng)
    n, d = sim.Y.shape
    os.makedirs(args.out, exist_ok=True)
    cats = io.default_names("y", d)
    data = io.CountData(sim.Y, sim.X, cats, io.default_names("x", sim.X.shape[1]))
    io.save_data(data, os.path.join(args.out, "counts.csv"),
                 os.path.join(args.out, "covariates.csv"))
    io.write_matrix(os.path.join(args.out, "theta_true.csv"), cats, sim.theta)
    io.write_matrix(os.path.join(args.out, "zeta_true.csv"), cats, sim.zeta)
    io.write_matrix(os.path.join(args.out, "z_true.csv"), cats, sim.z, integer=True)
    print(f"wrote scenario {args.scenario} data (n={n}, d={d}) to {args.out}")


def _truth(drawdir):
    paths = [os.path.join(drawdir, f) for f in ("theta_true.csv", "zeta_true.csv")]
    for p in paths:
        if not os.path.exists(p):
            raise io.DataError(f"{p}: truth file not found")
    return [np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2) for p in paths]


def cmd_diagnose(args):
    if not os.path.isdir(args.draws):
        raise io.DataError(f"{args.draws}: draws directory not found")
    draws = io.read_draws(args.draws)
    Y, names = io.load_counts(args.counts)
    if Y.shape != draws.theta.shape[1:]:
        raise io.DataError(f"{args.counts}: shape {Y.shape} does not match the draws "
                           f"{draws.theta.shape[1:]}")
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    out = lambda f: os.path.join(args.out, f)  # noqa: E731

    w = D.waic(draws, Y, rng)
    io.write_csv(out("waic.csv"), ["quantity", "value"],
                 [("waic", io.fmt(w.waic)), ("p_waic", io.fmt(w.p_waic)),
                  ("lppd", io.fmt(w.lppd.sum())), ("mc_rows", int(w.mc_rows.sum()))])
    r = D.rps_table(draws, Y, rng)
    io.write_csv(out("rps.csv"), ["category", "name", "rps"],
                 [(j, names[j], io.fmt(v)) for j, v in enumerate(r)])
    tr, ess = D.frobenius_trace(draws, Y)
    io.write_csv(out("frobenius_trace.csv"), ["iter", "frobenius"],
                 [(int(i), io.fmt(v)) for i, v in zip(draws.iteration, tr)])
    mp = D.mppi(draws)
    d, _, p = mp.shape
    io.write_csv(out("mppi.csv"), ["category", "level", "covariate", "mppi"],
                 [(j, LEVELS[l], c, io.fmt(mp[j, l, c]))
                  for j in range(d) for l in range(2) for c in range(p)])
    if args.truth:
        th, ze = _truth(args.truth)
        klt, klz, clamped = D.kl_traces(draws, th, ze)
        io.write_csv(out("kl_trace.csv"), ["iter", "kl_theta", "kl_zeta"],
                     [(int(i), io.fmt(a), io.fmt(b))
                      for i, a, b in zip(draws.iteration, klt, klz)])
        if clamped:
            print(f"note: {clamped} probabilities clamped at {D.KL_FLOOR} for KL")
    else:
        print("note: no --truth given; KL traces skipped")
    print(f"WAIC {w.waic:.3f} (p_waic {w.p_waic:.3f}); Frobenius trace ESS {ess:.1f}")


def cmd_pdp(args):
    if not os.path.isdir(args.draws):
        raise io.DataError(f"{args.draws}: draws directory not found")
    man = io.read_manifest(args.draws)
    if not os.path.exists(os.path.join(args.draws, "trees.txt")):
        raise io.DataError(f"{args.draws} has no tree snapshots; re-run fit with "
                           "--snapshot-trees")
    cov_path = args.covariates
    if cov_path is None:
        raise io.DataError("--covariates is required to build the reference rows")
    header, body = io._read_csv(cov_path)
    X = io._parse_covariates(cov_path, header, body)
    names = man.get("covariates", header)
    if args.covariate in names:
        k = names.index(args.covariate)
    elif args.covariate.isdigit() and int(args.covariate) < X.shape[1]:
        k = int(args.covariate)
    else:
        raise io.DataError(f"unknown covariate '{args.covariate}'; choose from {names}")
    draws = io.read_draws(args.draws)
    g = D.pdp(draws, X, k, grid_points=args.grid_points)
    rows = []
    for level in LEVELS:
        lo, med, hi = g.summary(level)
        for gi, gv in enumerate(g.grid):
            for j in range(lo.shape[1]):
                rows.append((io.fmt(gv), j, level, io.fmt(lo[gi, j]), io.fmt(med[gi, j]),
                             io.fmt(hi[gi, j])))
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    io.write_csv(args.out, ["grid_value", "category", "level", "q025", "median", "q975"], rows)
    print(f"wrote {len(rows)} rows to {args.out}")


def build_parser():
    ap = argparse.ArgumentParser(prog="zanimbart", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="run the sampler")
    f.add_argument("--counts", required=True)
    f.add_argument("--covariates", required=True)
    f.add_argument("--model", choices=VARIANTS)
    f.add_argument("--iters", type=int)
    f.add_argument("--burnin", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--sparse-splits", action="store_true")
    f.add_argument("--trees-theta", type=int)
    f.add_argument("--trees-zeta", type=int)
    f.add_argument("--snapshot-trees", action="store_true")
    f.add_argument("--n-jobs", type=int)
    f.add_argument("--config", help="file of 'key = value' lines; flags take precedence")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="generate a simulation data set")
    s.add_argument("--scenario", type=int, choices=(1, 2), required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("diagnose", help="WAIC, RPS, KL, Frobenius and MPPI tables")
    g.add_argument("--draws", required=True)
    g.add_argument("--counts", required=True)
    g.add_argument("--truth")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("pdp", help="partial dependence summaries")
    p.add_argument("--draws", required=True)
    p.add_argument("--covariate", required=True, help="column name or index")
    p.add_argument("--covariates", help="reference rows (defaults to the training file)")
    p.add_argument("--grid-points", type=int, default=31)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pdp)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "pdp" and args.covariates is None:
        args.covariates = io.read_manifest(args.draws).get("covariates_path") \
            if os.path.isdir(args.draws) and os.path.exists(
                os.path.join(args.draws, "manifest.json")) else None
    try:
        args.func(args)
    except (UsageError, io.DataError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericFailure, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
