"""Monte Carlo harness: bias/RMSE tables and rejection-rate tables.

Replication ``r`` of every cell draws its data from
``SeedSequence([master_seed, r])``, so results do not depend on execution
order or on the number of worker processes. W is fixed per sample size.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .config import RunConfig, WeightSpec, build_weights
from .errors import HarnessError, LogSheError
from .gmm import default_instruments, fit_gmm, fit_ogmm
from .inference import constrained_ogmm, d_test, j_test, lm_test, parse_constraint, wald_test
from .ml import fit_2sml, fit_ml
from .model import ErrorDistribution, LogSheModel, simulate, simulate_alternative

__all__ = ["McTable", "run_mc", "replication_seed", "Cell"]


def replication_seed(master_seed: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(r)])


@dataclass(frozen=True)
class Cell:
    """One grid point of a Monte Carlo design."""

    mode: str
    family: str
    n: int
    errors: str
    theta0: tuple
    methods: tuple
    master_seed: int
    W: dict
    W_star: dict
    kappa_max: int = 4
    n_starts: int = 3
    tol: float = 1e-6
    max_iter: int = 500
    moment_mode: str = "sample"
    dgp: str = "null"
    rho_star: float = 0.6
    constraint: str = "rho=0"


@lru_cache(maxsize=16)
def _weights(spec_json: str, n: int, seed: int):
    import json

    return build_weights(WeightSpec.model_validate(json.loads(spec_json)), n, seed)


def _cell_weights(cell: Cell):
    import json

    W = _weights(json.dumps(cell.W, sort_keys=True), cell.n, cell.master_seed)
    Ws = _weights(json.dumps(cell.W_star, sort_keys=True), cell.n, cell.master_seed)
    return W, Ws


def _simulate(cell: Cell, r: int):
    W, Ws = _cell_weights(cell)
    model = LogSheModel.create(cell.family, W)
    dist = ErrorDistribution.parse(cell.errors)
    seed = replication_seed(cell.master_seed, r)
    if cell.dgp == "null":
        data = simulate(model, cell.theta0, dist, seed=seed)
    else:
        data = simulate_alternative(cell.dgp, model, cell.theta0, Ws, dist, seed=seed, rho_star=cell.rho_star)
    return model, data


def run_replication(args):
    """Worker entry point: returns ``(r, {key: value or None})``."""
    cell, r = args
    out = {}
    try:
        model, data = _simulate(cell, r)
    except LogSheError:
        return r, None
    opts = dict(n_starts=cell.n_starts, tol=cell.tol, max_iter=cell.max_iter)
    if cell.mode == "estimation":
        system = None
        for m in cell.methods:
            try:
                if m == "ml":
                    f = fit_ml(model, data, moment_mode=cell.moment_mode, covariance=False, **opts)
                elif m == "2sml":
                    f = fit_2sml(model, data)
                else:
                    system = system or default_instruments(model.W, data.Z, cell.kappa_max, X=data.X)
                    if m == "gmm":
                        f = fit_gmm(system, model, data, covariance=False, **opts)
                    else:
                        f = fit_ogmm(system, model, data, covariance=False, **opts)
                out[m] = f.theta.tolist()
            except LogSheError:
                out[m] = None
        return r, out
    system = default_instruments(model.W, data.Z, cell.kappa_max, X=data.X)
    try:
        fit = fit_ogmm(system, model, data, **opts)
        if cell.mode == "jtest":
            jt = j_test(fit, system)
            return r, {"J": jt.statistic, "df": jt.df}
        c = parse_constraint(cell.constraint, data.K)
        cfit = constrained_ogmm(system, model, data, c, fit, tol=cell.tol, max_iter=cell.max_iter)
        return r, {
            "Wald": wald_test(fit, c).statistic,
            "LM": lm_test(cfit, system, model, data, c).statistic,
            "D": d_test(cfit, fit).statistic,
            "df": c.c_g,
        }
    except LogSheError:
        return r, None


def _run_cell(cell: Cell, reps: int, threads: int):
    tasks = [(cell, r) for r in range(reps)]
    if threads <= 1:
        results = [run_replication(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run_replication, tasks, chunksize=max(1, reps // (4 * threads))))
    results.sort(key=lambda t: t[0])
    return [res for _, res in results]


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


@dataclass
class McTable:
    """Rows of a Monte Carlo table plus replication bookkeeping."""

    columns: list
    rows: list = field(default_factory=list)
    replications: int = 0
    master_seed: int = 0
    kind: str = "estimation"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def lookup(self, **keys) -> list:
        return [r for r in self.rows if all(r.get(k) == v for k, v in keys.items())]


def _check_failures(label, failed, reps, limit):
    if failed > limit * reps:
        raise HarnessError(f"{label}: {failed} of {reps} replications failed (limit {limit:.0%})")


def _param_names(k: int) -> list[str]:
    return ["rho"] + [f"gamma{j}" for j in range(1, k)]


def _estimation_rows(cell: Cell, results, reps, limit):
    rows = []
    truth = np.asarray(cell.theta0)
    for m in cell.methods:
        est = [res[m] for res in results if res is not None and res.get(m) is not None]
        failed = reps - len(est)
        _check_failures(f"{m} at n={cell.n}, {cell.errors}", failed, reps, limit)
        E = np.asarray(est)
        err = E - truth
        bias = err.mean(axis=0)
        rmse = np.sqrt((err**2).mean(axis=0))
        for j, name in enumerate(_param_names(truth.size)):
            rows.append({
                "family": cell.family, "errors": cell.errors, "n": cell.n, "method": m.upper(),
                "param": name, "true": float(truth[j]), "bias": float(bias[j]), "rmse": float(rmse[j]),
                "reps": len(est), "failed": failed, "master_seed": cell.master_seed,
            })
    return rows


def _base_cell(cfg: RunConfig, **over) -> Cell:
    d, e, mc = cfg.dgp, cfg.estimator, cfg.mc
    seed = mc.master_seed if mc.master_seed is not None else cfg.seed
    if seed is None:
        raise HarnessError("Monte Carlo runs need mc.master_seed or --seed")
    kw = dict(
        mode=mc.mode, family=d.family, n=d.n, errors=d.errors, theta0=tuple(d.theta0),
        methods=tuple(e.methods), master_seed=int(seed), W=d.W.model_dump(), W_star=d.W_star.model_dump(),
        kappa_max=e.kappa_max, n_starts=e.n_starts, tol=e.tol, max_iter=e.max_iter,
        moment_mode=e.moment_mode, rho_star=d.rho_star, constraint=e.constraint or "rho=0",
    )
    kw.update(over)
    return Cell(**kw)


def run_mc(cfg: RunConfig, threads: int = 1) -> McTable:
    """Run the design described by ``cfg.mc`` and aggregate it.

    Estimation mode reports bias and RMSE per parameter, test mode raw and
    size-adjusted rejection rates of the Wald, LM and D tests, and jtest
    mode rejection rates of the overidentification test under the null and
    the alternative designs.
    """
    mc = cfg.mc
    reps = mc.replications
    ns = mc.n or [cfg.dgp.n]
    errs = mc.errors or [cfg.dgp.errors]
    fams = mc.families or [cfg.dgp.family]
    limit = mc.max_failure_rate
    threads = max(1, int(threads))
    if mc.mode == "estimation":
        rhos = mc.rho0 or [cfg.dgp.theta0[0]]
        table = McTable(["family", "errors", "n", "method", "param", "true", "bias", "rmse", "reps", "failed",
                         "master_seed"], kind="estimation")
        for fam in fams:
            for err in errs:
                for n in ns:
                    for rho in rhos:
                        cell = _base_cell(cfg, family=fam, errors=err, n=n,
                                          theta0=(rho,) + tuple(cfg.dgp.theta0[1:]))
                        res = _run_cell(cell, reps, threads)
                        table.rows.extend(_estimation_rows(cell, res, reps, limit))
        table.replications, table.master_seed = reps, _base_cell(cfg).master_seed
        return table
    if mc.mode == "test":
        return _test_table(cfg, fams, errs, ns, reps, threads, limit)
    return _jtest_table(cfg, fams, errs, ns, reps, threads, limit)


def _stats(results, key):
    return np.array([res[key] for res in results if res is not None])


def _test_table(cfg, fams, errs, ns, reps, threads, limit):
    from scipy.stats import chi2

    mc = cfg.mc
    rhos = list(mc.rho0 or [0.0])
    if 0.0 not in rhos:
        rhos = [0.0] + rhos
    table = McTable(["family", "errors", "n", "test", "rho0", "tau", "rejection", "size_adjusted", "critical",
                     "reps", "failed", "master_seed"], kind="test")
    for fam in fams:
        for err in errs:
            for n in ns:
                per_rho = {}
                for rho in rhos:
                    cell = _base_cell(cfg, family=fam, errors=err, n=n, theta0=(rho,) + tuple(cfg.dgp.theta0[1:]))
                    res = _run_cell(cell, reps, threads)
                    failed = sum(r is None for r in res)
                    _check_failures(f"tests at rho0={rho}, n={n}, {err}", failed, reps, limit)
                    per_rho[rho] = (res, failed)
                for test in ("Wald", "LM", "D"):
                    null = _stats(per_rho[0.0][0], test)
                    for rho in rhos:
                        res, failed = per_rho[rho]
                        s = _stats(res, test)
                        df = int(next(r["df"] for r in res if r is not None))
                        for tau in mc.taus:
                            crit = float(np.quantile(null, 1.0 - tau))
                            table.rows.append({
                                "family": fam, "errors": err, "n": n, "test": test, "rho0": rho, "tau": tau,
                                "rejection": float(np.mean(s > chi2.ppf(1.0 - tau, df))),
                                "size_adjusted": float(np.mean(s > crit)), "critical": crit,
                                "reps": int(s.size), "failed": failed, "master_seed": cell.master_seed,
                            })
    table.replications, table.master_seed = reps, _base_cell(cfg).master_seed
    return table


def _jtest_table(cfg, fams, errs, ns, reps, threads, limit):
    from scipy.stats import chi2

    mc = cfg.mc
    table = McTable(["family", "errors", "n", "dgp", "tau", "rejection", "df", "reps", "failed", "master_seed"],
                    kind="jtest")
    for fam in fams:
        for err in errs:
            for n in ns:
                for dgp in mc.dgps:
                    cell = _base_cell(cfg, family=fam, errors=err, n=n, dgp=dgp)
                    res = _run_cell(cell, reps, threads)
                    failed = sum(r is None for r in res)
                    _check_failures(f"J test, {dgp}, n={n}, {err}", failed, reps, limit)
                    s = _stats(res, "J")
                    df = int(next(r["df"] for r in res if r is not None))
                    for tau in mc.taus:
                        table.rows.append({
                            "family": fam, "errors": err, "n": n, "dgp": dgp, "tau": tau,
                            "rejection": float(np.mean(s > chi2.ppf(1.0 - tau, df))), "df": df,
                            "reps": int(s.size), "failed": failed, "master_seed": cell.master_seed,
                        })
    table.replications, table.master_seed = reps, _base_cell(cfg).master_seed
    return table


def resolve_threads(arg: int | None) -> int:
    """``--threads`` if given, else ``LOGSHE_THREADS``, else 1."""
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("LOGSHE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1
