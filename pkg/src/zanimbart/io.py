"""On-disk formats for data, posterior draws and diagnostic tables.

All tables are UTF-8 CSV with a header row. Draws are stored in long format:

=====================  ==============================================
file                   columns
=====================  ==============================================
theta.csv              iter, row, category, value
theta_population.csv   iter, row, category, value (logistic-normal only)
zeta.csv               iter, row, category, value, fixed
z.csv                  iter, row, category, value
u.csv                  iter, row, category, value (logistic-normal only)
hyper.csv              iter, a_lambda
usage.csv              iter, category, level, covariate, used
counters.csv           category, level, counter, value
trees.txt              one tree per line (see :func:`format_tree`)
manifest.json          run manifest
=====================  ==============================================

``fixed`` in zeta.csv is 1 when the zero probabilities are not sampled
(the multinomial variant, where every value is 0, or a fixed probit fit).
Floats are written with 17 significant digits so they round-trip exactly.
"""

import csv
from dataclasses import dataclass
import datetime
import json
import math
import os

import numpy as np

from . import __version__
from . import _kernels as K
from .sampler import LEVELS, PosteriorDraws

COUNTER_NAMES = ("proposed_grow", "proposed_prune", "proposed_change", "accepted_grow",
                 "accepted_prune", "accepted_change", "leaf_clamped", "capacity_rejected")


class DataError(ValueError):
    """Invalid input file."""


@dataclass
class CountData:
    """Validated counts and covariates."""

    Y: np.ndarray
    X: np.ndarray
    categories: list
    covariates: list

    @property
    def N(self):
        return self.Y.sum(axis=1)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.Y.shape[1]

    @property
    def p(self):
        return self.X.shape[1]


def _read_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 ({e})") from None
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError(f"{path}: header but no data rows")
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i + 1} has {len(r)} fields, header has {len(header)}")
    return header, body


def _parse_counts(path, header, body):
    Y = np.empty((len(body), len(header)), np.int64)
    for i, r in enumerate(body):
        for j, cell in enumerate(r):
            s = cell.strip()
            try:
                v = int(s)
            except ValueError:
                try:
                    f = float(s)
                except ValueError:
                    f = math.nan
                if not (math.isfinite(f) and f == int(f)):
                    raise DataError(f"{path}: row {i + 1}, column '{header[j]}': "
                                    f"'{cell}' is not an integer count") from None
                v = int(f)
            if v < 0:
                raise DataError(f"{path}: row {i + 1}, column '{header[j]}': "
                                f"negative count {v}")
            Y[i, j] = v
    return Y


def _parse_covariates(path, header, body):
    X = np.empty((len(body), len(header)))
    for i, r in enumerate(body):
        for j, cell in enumerate(r):
            try:
                X[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i + 1}, column '{header[j]}': "
                                f"'{cell}' is not a number") from None
            if not math.isfinite(X[i, j]):
                raise DataError(f"{path}: row {i + 1}, column '{header[j]}': non-finite value")
    return X


def load_counts(path):
    header, body = _read_csv(path)
    return _parse_counts(path, header, body), header


def load_data(counts_path, covariates_path):
    """Read and validate a counts file and a covariates file.

    Returns
    -------
    CountData
    """
    ch, cb = _read_csv(counts_path)
    Y = _parse_counts(counts_path, ch, cb)
    xh, xb = _read_csv(covariates_path)
    X = _parse_covariates(covariates_path, xh, xb)
    if Y.shape[0] != X.shape[0]:
        raise DataError(f"{counts_path} has {Y.shape[0]} rows but {covariates_path} "
                        f"has {X.shape[0]}")
    if Y.shape[1] < 2:
        raise DataError(f"{counts_path}: need at least two categories")
    return CountData(Y, X, list(ch), list(xh))


def fmt(x):
    """Round-trip float formatting."""
    return repr(float(x))


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_matrix(path, header, A, integer=False):
    A = np.asarray(A)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, A, fmt="%d" if integer else "%.17g", delimiter=",")


def save_data(data, counts_path, covariates_path):
    write_matrix(counts_path, data.categories, data.Y, integer=True)
    write_matrix(covariates_path, data.covariates, data.X)


def default_names(prefix, k):
    return [f"{prefix}{j + 1}" for j in range(k)]


def _long(path, it, A, integer=False, extra=None):
    """Write (K, n, d) ``A`` as iter,row,category,value[,extra] rows."""
    Kk, n, d = A.shape
    cols = [np.repeat(it, n * d), np.tile(np.repeat(np.arange(n), d), Kk),
            np.tile(np.arange(d), Kk * n), A.reshape(-1)]
    header = ["iter", "row", "category", "value"]
    fmts = ["%d", "%d", "%d", "%d" if integer else "%.17g"]
    if extra is not None:
        name, val = extra
        cols.append(np.full(A.size, val))
        header.append(name)
        fmts.append("%d")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        if A.size:
            np.savetxt(fh, np.column_stack(cols).astype(object), fmt=fmts, delimiter=",")


def _read_long(path, Kk, n, d, dtype=float):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[0] != Kk * n * d:
        raise DataError(f"{path}: expected {Kk * n * d} rows, found {arr.shape[0]}")
    return arr[:, 3].reshape(Kk, n, d).astype(dtype)


def format_tree(ptr, cvar, cval, cdepth, h):
    """One tree as space-separated ``depth:var:cut`` / ``depth:L:value`` tokens."""
    toks = []
    for t in range(ptr[h], ptr[h + 1]):
        kind = "L" if cvar[t] < 0 else str(int(cvar[t]))
        toks.append(f"{int(cdepth[t])}:{kind}:{fmt(cval[t])}")
    return " ".join(toks)


def parse_trees(token_lines):
    """Compact ensemble tuple from a list of tree token strings."""
    cvar, cval, cdepth, ptr = [], [], [], [0]
    for line in token_lines:
        for tok in line.split():
            dep, kind, val = tok.split(":")
            cdepth.append(int(dep))
            cvar.append(-1 if kind == "L" else int(kind))
            cval.append(float(val))
        ptr.append(len(cvar))
    cvar = np.array(cvar, np.int32)
    cdepth = np.array(cdepth, np.int16)
    cright = np.full(len(cvar), -1, np.int32)
    for h in range(len(ptr) - 1):
        a, b = ptr[h], ptr[h + 1]
        for t in range(a, b):
            if cvar[t] >= 0:
                u = t + 2
                while cdepth[u] != cdepth[t] + 1:
                    u += 1
                cright[t] = u - a
    return (np.array(ptr, np.int64), cvar, np.array(cval, float), cright, cdepth)


def write_snapshots(path, draws):
    """Tree snapshots: ``iter,category,level,tree,<tokens>`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,category,level,tree,nodes\n")
        for k, snap in enumerate(draws.snapshots):
            it = int(draws.iteration[k])
            for j, pair in enumerate(snap):
                for lev, (ptr, cvar, cval, _, cdepth) in enumerate(pair):
                    for h in range(ptr.shape[0] - 1):
                        fh.write(f"{it},{j},{LEVELS[lev]},{h},"
                                 f"{format_tree(ptr, cvar, cval, cdepth, h)}\n")


def read_snapshots(path, iterations, d):
    index = {int(it): k for k, it in enumerate(iterations)}
    lines = [[[[], []] for _ in range(d)] for _ in iterations]
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            it, j, lev, _, nodes = line.rstrip("\n").split(",", 4)
            lines[index[int(it)]][int(j)][LEVELS.index(lev)].append(nodes)
    return [[tuple(parse_trees(ls) for ls in pair) for pair in snap] for snap in lines]


def build_manifest(config, draws, started, finished, data=None):
    rates = {}
    for j in range(draws.counters.shape[0]):
        for lev in range(2):
            c = draws.counters[j, lev]
            for i, mv in enumerate(("grow", "prune", "change")):
                prop = int(c[K.C_PROPOSED + i])
                rates[f"{j}/{LEVELS[lev]}/{mv}"] = float(c[K.C_ACCEPTED + i] / prop) if prop \
                    else 0.0
    out = {
        "version": f"artifact-{__version__}",
        "config": config.to_dict(),
        "seed": config.seed,
        "started": started,
        "finished": finished,
        "kept_iterations": int(draws.n_kept),
        "acceptance_rates": rates,
        "acceptance_overall": draws.acceptance_rates(),
        "events": {k: int(v) for k, v in draws.events.items()},
    }
    if data is not None:
        out["categories"] = data.categories
        out["covariates"] = data.covariates
    return out


def now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def write_draws(outdir, draws, config, data=None, started=None, extra=None):
    """Write every draw table plus the manifest into ``outdir``."""
    os.makedirs(outdir, exist_ok=True)
    it = draws.iteration
    _long(os.path.join(outdir, "theta.csv"), it, draws.theta)
    fixed = int(draws.variant == "multinomial-bart" or draws.zeta_fit_override is not None)
    _long(os.path.join(outdir, "zeta.csv"), it, draws.zeta, extra=("fixed", fixed))
    _long(os.path.join(outdir, "z.csv"), it, draws.z, integer=True)
    if draws.u is not None:
        _long(os.path.join(outdir, "u.csv"), it, draws.u)
        _long(os.path.join(outdir, "theta_population.csv"), it, draws.theta_population)
    write_csv(os.path.join(outdir, "hyper.csv"), ["iter", "a_lambda"],
              [(int(i), fmt(a)) for i, a in zip(it, draws.a_lambda)])
    Kk, d, _, p = draws.usage.shape
    write_csv(os.path.join(outdir, "usage.csv"), ["iter", "category", "level", "covariate", "used"],
              [(int(it[k]), j, LEVELS[l], c, int(draws.usage[k, j, l, c]))
               for k in range(Kk) for j in range(d) for l in range(2) for c in range(p)])
    write_csv(os.path.join(outdir, "counters.csv"), ["category", "level", "counter", "value"],
              [(j, LEVELS[l], COUNTER_NAMES[c], int(draws.counters[j, l, c]))
               for j in range(d) for l in range(2) for c in range(K.N_COUNTERS)])
    snap_path = os.path.join(outdir, "trees.txt")
    if draws.snapshots is not None:
        write_snapshots(snap_path, draws)
    elif os.path.exists(snap_path):
        os.remove(snap_path)
    manifest = build_manifest(config, draws, started or now(), now(), data)
    manifest["variant"] = draws.variant
    manifest["zeta_fit_override"] = draws.zeta_fit_override
    manifest["shape"] = {"kept": int(Kk), "n": int(draws.theta.shape[1]), "d": int(d),
                         "p": int(p)}
    manifest.update(extra or {})
    with open(os.path.join(outdir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_manifest(drawdir):
    path = os.path.join(drawdir, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"{path}: not found; is {drawdir} a fit output directory?")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_draws(drawdir):
    """Rebuild :class:`PosteriorDraws` from a directory written by :func:`write_draws`."""
    man = read_manifest(drawdir)
    sh = man["shape"]
    Kk, n, d, p = sh["kept"], sh["n"], sh["d"], sh["p"]
    path = lambda f: os.path.join(drawdir, f)  # noqa: E731
    for f in ("theta.csv", "zeta.csv", "z.csv", "hyper.csv", "usage.csv", "counters.csv"):
        if not os.path.exists(path(f)):
            raise DataError(f"{path(f)}: missing draw file")
    hyper = np.loadtxt(path("hyper.csv"), delimiter=",", skiprows=1, ndmin=2)
    it = hyper[:, 0].astype(np.int64)
    theta = _read_long(path("theta.csv"), Kk, n, d)
    ln = os.path.exists(path("u.csv"))
    u = _read_long(path("u.csv"), Kk, n, d) if ln else None
    theta_pop = _read_long(path("theta_population.csv"), Kk, n, d) if ln else theta
    usage = np.zeros((Kk, d, 2, p), bool)
    with open(path("usage.csv"), encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        pos = {int(i): k for k, i in enumerate(it)}
        for row in r:
            usage[pos[int(row[0])], int(row[1]), LEVELS.index(row[2]), int(row[3])] = \
                row[4] == "1"
    counters = np.zeros((d, 2, K.N_COUNTERS), np.int64)
    with open(path("counters.csv"), encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            counters[int(row[0]), LEVELS.index(row[1]), COUNTER_NAMES.index(row[2])] = int(row[3])
    snaps = read_snapshots(path("trees.txt"), it, d) if os.path.exists(path("trees.txt")) \
        else None
    return PosteriorDraws(
        variant=man["variant"], iteration=it, theta=theta, theta_population=theta_pop,
        zeta=_read_long(path("zeta.csv"), Kk, n, d),
        z=_read_long(path("z.csv"), Kk, n, d, np.int8), u=u, a_lambda=hyper[:, 1],
        usage=usage, snapshots=snaps, counters=counters, events=dict(man.get("events", {})),
        zeta_fit_override=man.get("zeta_fit_override"))


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: config file not found") from None
    with fh:
        for i, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}: line {i}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out
