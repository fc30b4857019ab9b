"""Command-line interface: ``logshe <verb> [options]``.

Exit codes: 0 success, 1 configuration or validation error, 2 numerical
failure (including non-convergence and harness failures).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, build_weights, coordinate_draw, load_config
from .effects import effects_table, write_effects_csv
from .errors import ConfigError, FitFailedError, HarnessError, InvalidArgumentError, NumericalError, \
    UnsupportedMethodError
from .gmm import default_instruments, fit_gmm, fit_ogmm
from .harness import resolve_threads, run_mc
from .inference import constrained_ogmm, d_test, j_test, lm_test, parse_constraint, wald_test
from .ml import fit_2sml, fit_ml
from .model import Dataset, ErrorDistribution, LogSheModel, simulate, simulate_alternative
from .results import to_jsonable
from .selection import select_model
from .weights import rho_interval

__all__ = ["main", "build_parser"]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(to_jsonable(doc), indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, name: str, cfg: RunConfig, seed, files, **extra) -> Path:
    doc = {
        "command": name,
        "version": __version__,
        "seed": seed,
        "config": cfg.dump(),
        "files": {Path(f).name: sha256_file(f) for f in files},
        **extra,
    }
    path = out / f"{cfg.output.prefix}{name}_manifest.json"
    _write_json(path, doc)
    return path


def _setup(args):
    cfg = load_config(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = cfg.seed
    out = Path(getattr(args, "out", None) or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, seed, out


def _out_path(cfg: RunConfig, out: Path, name: str) -> Path:
    return out / f"{cfg.output.prefix}{name}"


def _count_rows(path) -> int:
    with open(path, newline="") as fh:
        return sum(1 for row in csv.reader(fh) if row) - 1


def _load_data(cfg: RunConfig, args, seed) -> tuple[LogSheModel, Dataset]:
    path = getattr(args, "data", None)
    if path is None:
        raise ConfigError("this command needs --data")
    spec = cfg.dgp.W.model_copy()
    if getattr(args, "coords", None):
        spec.kind, spec.coords = "knn", args.coords
    n = _count_rows(path)
    W = build_weights(spec, n, seed)
    n_x = cfg.dgp.n_x if cfg.dgp.durbin else None
    data = Dataset.from_csv(path, W, durbin_x=n_x)
    if cfg.dgp.durbin and data.K != 1 + 2 * cfg.dgp.n_x:
        raise InvalidArgumentError(f"Durbin layout with n_x={cfg.dgp.n_x} needs {1 + 2 * cfg.dgp.n_x} columns")
    model = LogSheModel.create(cfg.dgp.family, W, durbin=cfg.dgp.durbin)
    return model, data


# ---------------------------------------------------------------- verbs
def cmd_simulate(args) -> int:
    cfg, seed, out = _setup(args)
    if seed is None:
        raise ConfigError("simulate needs --seed or a 'seed' entry")
    d = cfg.dgp
    W = build_weights(d.W, d.n, seed)
    lo, hi = rho_interval(W, d.family)
    if not lo < d.theta0[0] < hi:
        raise ConfigError(f"rho0={d.theta0[0]} outside the admissible interval ({lo:.4g}, {hi:.4g})")
    model = LogSheModel.create(d.family, W, durbin=d.durbin)
    dist = ErrorDistribution.parse(d.errors)
    if d.alternative is None:
        data = simulate(model, d.theta0, dist, seed=seed, n_x=d.n_x)
    else:
        Ws = build_weights(d.W_star, d.n, seed)
        data = simulate_alternative(d.alternative, model, d.theta0, Ws, dist, seed=seed, rho_star=d.rho_star,
                                    n_x=d.n_x)
    files = [_out_path(cfg, out, "data.csv")]
    data.to_csv(files[0])
    if d.W.kind == "knn":
        cpath = _out_path(cfg, out, "coords.csv")
        if d.W.coords is not None:
            shutil.copyfile(d.W.coords, cpath)
        else:
            s = d.W.coord_seed if d.W.coord_seed is not None else seed
            pts = coordinate_draw(int(s), d.n)
            with open(cpath, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["id", "x", "y"])
                for i, p in enumerate(pts):
                    w.writerow([i, repr(float(p[0])), repr(float(p[1]))])
        files.append(cpath)
    _manifest(out, "simulate", cfg, seed, files, resampled_errors=data.meta.get("resampled", 0))
    return 0


def _fit_one(method: str, model, data, cfg: RunConfig):
    e = cfg.estimator
    opts = dict(n_starts=e.n_starts, tol=e.tol, max_iter=e.max_iter)
    if method == "ml":
        return fit_ml(model, data, moment_mode=e.moment_mode, **opts), None
    if method == "2sml":
        return fit_2sml(model, data), None
    system = default_instruments(model.W, data.Z, e.kappa_max, X=data.X)
    if method == "gmm":
        return fit_gmm(system, model, data, moment_mode=e.moment_mode, **opts), system
    return fit_ogmm(system, model, data, **opts), system


def cmd_fit(args) -> int:
    cfg, seed, out = _setup(args)
    model, data = _load_data(cfg, args, seed)
    fits, instruments, status = {}, {}, 0
    for m in cfg.estimator.methods:
        try:
            fit, system = _fit_one(m, model, data, cfg)
        except FitFailedError as exc:
            if exc.best is None:
                raise
            fit, system, status = exc.best, None, 2
            print(f"{m}: {exc}", file=sys.stderr)
        fits[m] = fit.to_dict()
        if system is not None:
            instruments[m] = system.manifest()
    path = _out_path(cfg, out, "fit.json")
    _write_json(path, {"family": cfg.dgp.family, "durbin": cfg.dgp.durbin, "n": data.n, "fits": fits})
    _manifest(out, "fit", cfg, seed, [args.data, path], instruments=instruments)
    return status


def _read_fits(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
        return doc["fits"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InvalidArgumentError(f"{path}: not a fit file ({exc})") from None


def cmd_test(args) -> int:
    cfg, seed, out = _setup(args)
    if not args.fit:
        raise ConfigError("test needs --fit")
    fits = _read_fits(args.fit)
    ogmm = [v for v in fits.values() if str(v.get("method", "")).startswith("OGMM")]
    if not ogmm:
        methods = sorted(str(v.get("method")) for v in fits.values())
        raise UnsupportedMethodError(f"tests need an OGMM fit, the fit file holds {methods}")
    text = cfg.estimator.constraint
    if text is None or not text.strip():
        raise ConfigError("test needs a non-empty estimator.constraint")
    model, data = _load_data(cfg, args, seed)
    e = cfg.estimator
    c = parse_constraint(text, data.K)
    system = default_instruments(model.W, data.Z, e.kappa_max, X=data.X)
    ufit = fit_ogmm(system, model, data, start=ogmm[0]["theta"], n_starts=e.n_starts, tol=e.tol,
                    max_iter=e.max_iter)
    cfit = constrained_ogmm(system, model, data, c, ufit, tol=e.tol, max_iter=e.max_iter)
    results = [wald_test(ufit, c), lm_test(cfit, system, model, data, c), d_test(cfit, ufit)]
    if system.n_moments > data.K + 1:
        results.append(j_test(ufit, system))
    path = _out_path(cfg, out, "tests.json")
    _write_json(path, {
        "constraint": text, "c_g": c.c_g,
        "unconstrained_theta": ufit.theta, "constrained_theta": cfit.theta,
        "tests": [r.to_dict() for r in results],
    })
    _manifest(out, "test", cfg, seed, [args.data, args.fit, path], instruments=system.manifest())
    return 0


def cmd_mc(args) -> int:
    cfg, seed, out = _setup(args)
    if seed is not None and cfg.mc.master_seed is None:
        cfg.mc.master_seed = int(seed)
    threads = resolve_threads(getattr(args, "threads", None))
    table = run_mc(cfg, threads)
    path = _out_path(cfg, out, f"mc_{table.kind}.csv")
    table.write(path)
    _manifest(out, "mc", cfg, table.master_seed, [path], replications=table.replications,
              n_starts=cfg.estimator.n_starts)
    return 0


def cmd_bic_select(args) -> int:
    cfg, seed, out = _setup(args)
    model, data = _load_data(cfg, args, seed)
    b = cfg.bic
    if not all(b.with_x) and data.K == 1:
        raise InvalidArgumentError("data has no exogenous columns")
    e = cfg.estimator
    report = select_model(data, families=tuple(b.families), with_x=tuple(b.with_x), threshold=b.threshold,
                          names=cfg.variables, n_starts=e.n_starts, tol=e.tol, max_iter=e.max_iter)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    jpath = _out_path(cfg, out, "bic.json")
    _write_json(jpath, report.to_dict())
    cpath = _out_path(cfg, out, "bic.csv")
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "with_x", "loglik", "n_params", "bic", "converged"])
        for r in report.rows:
            w.writerow([r.family, r.with_x, repr(r.loglik), r.n_params, repr(r.bic), r.converged])
    _manifest(out, "bic-select", cfg, seed, [args.data, jpath, cpath])
    return 0


def cmd_effects(args) -> int:
    cfg, seed, out = _setup(args)
    if not args.fit:
        raise ConfigError("effects needs --fit")
    fits = _read_fits(args.fit)
    key = args.method or next(iter(fits))
    if key not in fits:
        raise InvalidArgumentError(f"fit file has no '{key}' entry")
    if not cfg.dgp.durbin:
        raise InvalidArgumentError("effects need a Durbin layout fit")
    model, data = _load_data(cfg, args, seed)
    theta = np.asarray(fits[key]["theta"], dtype=float)
    if theta.size != data.K + 1:
        raise InvalidArgumentError(f"fit has {theta.size} parameters, data needs {data.K + 1}")
    names = cfg.variables
    if names is not None and len(names) == data.K:
        names = names[1 : 1 + cfg.dgp.n_x]
    rows = effects_table(model, data, theta, names)
    path = _out_path(cfg, out, "effects.csv")
    write_effects_csv(path, rows)
    _manifest(out, "effects", cfg, seed, [args.data, args.fit, path], method=key)
    return 0


# --------------------------------------------------------------- parser
def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="JSON run configuration")
    p.add_argument("--seed", type=int, metavar="N", default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--threads", type=int, metavar="N", default=argparse.SUPPRESS,
                   help="worker processes (default: LOGSHE_THREADS or 1)")
    p.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="logshe", parents=[common],
                                     description="Log spatial heteroskedasticity models.")
    parser.add_argument("--version", action="version", version=f"logshe {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, fn, help_, data=False, fit=False):
        p = sub.add_parser(name, parents=[common], help=help_)
        if data:
            p.add_argument("--data", metavar="CSV", help="dataset with header y,z1..zK")
            p.add_argument("--coords", metavar="CSV", help="coordinates (id,x,y) for k-NN weights")
        if fit:
            p.add_argument("--fit", metavar="JSON", help="fit file written by 'fit'")
        p.set_defaults(func=fn)
        return p

    add("simulate", cmd_simulate, "simulate a dataset")
    add("fit", cmd_fit, "fit the configured estimators", data=True)
    add("test", cmd_test, "Wald, LM, D and J tests from an OGMM fit", data=True, fit=True)
    add("mc", cmd_mc, "run a Monte Carlo design")
    add("bic-select", cmd_bic_select, "BIC comparison and backward elimination", data=True)
    p = add("effects", cmd_effects, "average total, direct and indirect effects", data=True, fit=True)
    p.add_argument("--method", help="which fit in the fit file (default: the first)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NumericalError, FitFailedError, HarnessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InvalidArgumentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
