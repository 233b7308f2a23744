"""Command-line interface: fit, simulate, sweep, gradcheck, dump-nodes, diagnose.

Exit codes: 0 ok, 1 quality gate failed, 2 config error, 3 I/O error,
4 sampler abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import config as _config
from .analysis import Grid
from .diagnostics import diagnostics
from .ecf import as_dataset, load_csv
from .errors import ConfigError, IdentificationError, SamplerAbort
from .likelihood import QuasiPosterior, gradient_check
from .pipeline import (
    build_model, build_quadrature, default_density_grid, density_summary, factor_block, fit_model,
    suggested_T,
)
from .prior import log_prior_and_grad, sample_prior_state
from .quadrature import SphereLineQuadrature
from .simulate import gen_deconv, gen_factor, gen_repmeas, run_experiment

EXIT_OK, EXIT_GATE, EXIT_CONFIG, EXIT_IO, EXIT_ABORT = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-4

log = logging.getLogger("qblatent")


class ArtifactConflict(OSError):
    pass


# -- artifact writing ------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_artifact(path: Path, text: str) -> Path:
    """Write ``text`` unless ``path`` already holds different content."""
    data = text.encode("utf-8")
    if path.exists():
        if path.read_bytes() == data:
            return path
        raise ArtifactConflict(f"{path} exists with different content; refusing to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def _name(stem, h, ext):
    return f"{stem}-{h}.{ext}"


def _clean(obj):
    """Replace non-finite floats so reports stay valid JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if np.isnan(v):
            return None
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# -- data ------------------------------------------------------------------

@dataclass
class Problem:
    kind: str
    data: dict
    loadings: object
    truth: object  # density evaluator for the reported block, when known
    n: int
    d: int


def _generate(cfg: _config.RunConfig, n=None, seed=None):
    sc = cfg.scenario()
    n = sc.n_grid[0] if n is None else n
    seed = sc.seeds[0] if seed is None else seed
    if cfg.kind == "deconv":
        y, eps, truth = gen_deconv(sc, seed, n)
        return {"y": y, "eps": eps}, truth, sc.loadings
    if cfg.kind == "repmeas":
        y1, y2, truth = gen_repmeas(sc, seed, n)
        return {"y1": y1, "y2": y2}, truth, sc.loadings
    y, truths, _ = gen_factor(sc, seed, n)
    k = factor_block(cfg.likelihood())[1]
    return {"y": y}, truths[k], sc.loadings


def load_problem(cfg: _config.RunConfig, n=None, seed=None) -> Problem:
    if cfg.has_scenario:
        data, truth, loadings = _generate(cfg, n, seed)
    else:
        data = cfg.load_data()
        truth = None
        loadings = cfg.loadings()
    first = as_dataset(next(iter(data.values())))
    d = 1 if cfg.kind == "factor" else first.shape[1]
    return Problem(cfg.kind, data, loadings, truth, first.shape[0], d)


def _model_data(p: Problem) -> dict:
    return p.data


# -- fit -------------------------------------------------------------------

def _chain_rows(result, spec):
    qp = result.posterior
    rows = []
    for c in result.chains:
        for i, x in enumerate(c.draws):
            params = qp.constrain(x)
            cons = []
            for p in params:
                cons += list(p.weights) + list(p.atoms.ravel()) + list(p.covariance[np.triu_indices(p.d)])
            rows.append(
                [c.chain, i, _fmt(c.logp[i]), _fmt(c.accept_stat[i]), int(c.divergent[i]),
                 int(c.tree_depth[i]), int(c.n_leapfrog[i]), _fmt(c.energy[i])]
                + [_fmt(v) for v in x] + [_fmt(v) for v in cons]
            )
    return rows


def _chain_header(qp, spec):
    nb = qp.n_blocks
    head = ["chain", "draw", "logp", "accept_stat", "divergent", "tree_depth", "n_leapfrog", "energy"]
    pre = (lambda b: f"b{b + 1}_") if nb > 1 else (lambda b: "")
    for b in range(nb):
        head += [f"{pre(b)}u{i}" for i in range(spec.dim)]
    iu = np.triu_indices(spec.d)
    for b in range(nb):
        head += [f"{pre(b)}w{j + 1}" for j in range(spec.K)]
        head += [f"{pre(b)}mu{j + 1}_{a + 1}" for j in range(spec.K) for a in range(spec.d)]
        head += [f"{pre(b)}cov{a + 1}{c + 1}" for a, c in zip(*iu)]
    return head


def _density_text(est):
    buf = io.StringIO()
    pts = est.grid.points
    levels = sorted(est.bands)
    head = [f"x{i + 1}" for i in range(pts.shape[1])] + ["mean"]
    for lv in levels:
        head += [f"lower_{lv:g}", f"upper_{lv:g}"]
    rows = []
    for i, p in enumerate(pts):
        row = [_fmt(v) for v in p] + [_fmt(est.mean_density[i])]
        for lv in levels:
            lo, up = est.bands[lv]
            row += [_fmt(lo[i]), _fmt(up[i])]
        rows.append(row)
    buf.write(_csv_text(head, rows))
    return buf.getvalue()


def fit_problem(cfg: _config.RunConfig, prob: Problem):
    """Fit and summarise; returns ``(result, report dict, artifacts dict of name -> text)``."""
    settings = cfg.likelihood()
    model = build_model(prob.kind, _model_data(prob), settings, prob.loadings)
    proxy = None if prob.kind == "factor" else next(iter(prob.data.values()))
    spec = cfg.prior(proxy, prob.d)
    init = cfg.raw["sampler"]["init"]
    result = fit_model(model, spec, cfg.hmc(), init=init, map_starts=cfg.raw["sampler"]["map_starts"])
    out = cfg.raw["output"]
    level = out["band_level"]
    if prob.d > 2:
        grid = None
    else:
        grid = default_density_grid(prob.kind, prob.data, prob.loadings, settings, points=out["grid_points"])
    h = cfg.hash()
    diag = result.diagnostics
    report = {
        "version": __version__,
        "schema_version": _config.SCHEMA_VERSION,
        "config_hash": h,
        "config": cfg.materialized(),
        "n": prob.n,
        "d": prob.d,
        "T": settings.T,
        "suggested_T": suggested_T(prob.n),
        "n_nodes": int(len(model.weights)),
        "chains": [
            {"chain": c.chain, "step_size": c.step_size, "mean_accept": c.mean_accept,
             "divergences": c.n_divergent, "warmup_divergences": c.warmup_divergences,
             "mean_tree_depth": float(c.tree_depth.mean())}
            for c in result.chains
        ],
        "diagnostics": diag.to_dict(),
        "rejected_evaluations": result.posterior.floor_breaches,
    }
    arts = {}
    block = 0
    if grid is not None:
        demean = prob.kind == "factor"
        est, err = density_summary(result, grid, block, demean=demean, levels=(level,), truth=prob.truth)
        arts[_name("density", h, "csv")] = _density_text(est)
        report["density"] = {"demeaned": demean, "grid_points": len(grid), "error": err}
        if demean:
            raw_est, raw_err = density_summary(result, grid, block, demean=False, levels=(level,),
                                               truth=prob.truth)
            arts[_name("density-raw", h, "csv")] = _density_text(raw_est)
            report["density_raw"] = {"error": raw_err}
    arts[_name("chains", h, "csv")] = _csv_text(_chain_header(result.posterior, spec), _chain_rows(result, spec))
    thr = out["rhat_threshold"]
    max_r = diag.max_rhat
    gate_ok = not (np.isfinite(max_r) or np.isinf(max_r)) or max_r <= thr
    report["quality_gate"] = {"rhat_threshold": thr, "max_rhat": max_r, "passed": bool(gate_ok),
                              "enforced": out["rhat_gate"]}
    report = _clean(report)
    arts[_name("report", h, "json")] = _json_text(report)
    return result, report, arts


def cmd_fit(cfg: _config.RunConfig, args) -> int:
    prob = load_problem(cfg)
    log.info("fitting %s model: n=%d, d=%d, T=%g (suggested T_n=%.3f)", prob.kind, prob.n, prob.d,
             cfg.likelihood().T, suggested_T(prob.n))
    result, report, arts = fit_problem(cfg, prob)
    for name, text in arts.items():
        write_artifact(cfg.out_dir / name, text)
    gate = report["quality_gate"]
    print(f"config hash {report['config_hash']}; wrote {len(arts)} artifacts to {cfg.out_dir}")
    print(f"max R-hat {gate['max_rhat']}; divergences {report['diagnostics']['divergences']}; "
          f"elapsed {result.elapsed:.1f}s")
    if "density" in report and report["density"]["error"]:
        e = report["density"]["error"]
        print(f"L2 error {e['l2']:.5f}; sup error {e['linf']:.5f}")
    if not gate["passed"]:
        msg = f"max R-hat {gate['max_rhat']} exceeds {gate['rhat_threshold']}"
        if cfg.raw["output"]["rhat_gate"]:
            print(f"quality gate failed: {msg}", file=sys.stderr)
            return EXIT_GATE
        print(f"warning: {msg}", file=sys.stderr)
    return EXIT_OK


# -- simulate / sweep ------------------------------------------------------

def cmd_simulate(cfg: _config.RunConfig, args) -> int:
    if not cfg.has_scenario:
        raise ConfigError("model.scenario", "simulate needs a scenario block")
    h = cfg.hash()
    sc = cfg.scenario()
    written = []
    for n in sc.n_grid:
        for seed in sc.seeds:
            data, _, _ = _generate(cfg, n, seed)
            for key, arr in data.items():
                rows = [[_fmt(v) for v in row] for row in as_dataset(arr)]
                name = f"{key}-n{n}-s{seed}-{h}.csv"
                written.append(write_artifact(cfg.out_dir / name, _csv_text(None, rows)))
    print(f"wrote {len(written)} datasets to {cfg.out_dir}")
    return EXIT_OK


def sweep_cell(cfg: _config.RunConfig, n: int, seed: int) -> dict:
    prob = load_problem(cfg, n, seed)
    result, report, _ = fit_problem(cfg, prob)
    err = report.get("density", {}).get("error") or {"l2": float("nan"), "linf": float("nan")}
    return {"l2": err["l2"], "linf": err["linf"], "rhat_max": result.diagnostics.max_rhat,
            "divergences": result.diagnostics.divergences}


def cmd_sweep(cfg: _config.RunConfig, args) -> int:
    if not cfg.has_scenario:
        raise ConfigError("model.scenario", "sweep needs a scenario block")
    T_values = args.T_values or [cfg.likelihood().T]
    all_rows, trends = [], {}
    for T in T_values:
        sub = _config.from_dict(cfg.raw, cfg.base_dir, {"likelihood.T": float(T)})
        rep = run_experiment(sub.scenario(), lambda sc, n, seed: sweep_cell(sub, n, seed),
                             log=lambda r: log.info("cell %s", r))
        for r in rep.rows:
            r["T"] = float(T)
        all_rows += rep.rows
        trends[str(T)] = rep.trend()
    h = cfg.hash()
    cols = ["model", "T", "n", "seed", "l2", "linf", "rhat_max", "divergences", "wall_time", "status"]
    tidy = _csv_text(cols, [[r[c] for c in cols] for r in all_rows])
    write_artifact(cfg.out_dir / _name("sweep", h, "csv"), tidy)
    write_artifact(cfg.out_dir / _name("sweep", h, "json"), _json_text(_clean({
        "version": __version__, "config_hash": h, "config": cfg.materialized(),
        "cells": all_rows, "trend_by_T": trends,
        "suggested_T": {str(n): suggested_T(n) for n in cfg.scenario().n_grid},
    })))
    for T, tr in trends.items():
        print(f"T={T}: median L2 by n {tr['medians']}; decreasing={tr['decreasing']}")
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------

def cmd_gradcheck(cfg: _config.RunConfig, args) -> int:
    prob = load_problem(cfg)
    settings = cfg.likelihood()
    model = build_model(prob.kind, prob.data, settings, prob.loadings)
    proxy = None if prob.kind == "factor" else next(iter(prob.data.values()))
    spec = cfg.prior(proxy, prob.d)
    qp = QuasiPosterior(model, spec)
    rng = np.random.default_rng(cfg.raw["sampler"]["seed"])

    def corrupt(fn):
        def wrapped(x):
            v, g = fn(x)
            g = g.copy()
            g[0] += 1e-2 * (1.0 + abs(g[0]))
            return v, g
        return wrapped

    targets = {"quasi_posterior": qp.neg_loglik_grad,
               "log_prior": lambda x: log_prior_and_grad(x[: spec.dim], spec)}
    if args.corrupt_gradient:
        targets = {k: corrupt(f) for k, f in targets.items()}
    worst_all = 0.0
    for name, fn in targets.items():
        errs = []
        tried = 0
        while len(errs) < args.states and tried < 50 * args.states:
            tried += 1
            x = np.concatenate([sample_prior_state(spec, rng) for _ in range(qp.n_blocks)])
            if not np.isfinite(fn(x)[0]):
                continue
            errs.append(gradient_check(fn, x))
        if not errs:
            print(f"{name}: no state with a finite objective", file=sys.stderr)
            return EXIT_GATE
        E = np.max(errs, axis=0)
        j = int(np.argmax(E))
        worst_all = max(worst_all, float(E[j]))
        print(f"{name}: {len(errs)} states, worst relative error {E[j]:.3e} at coordinate {j}")
        for i, e in enumerate(E):
            print(f"  coord {i:4d}  {e:.3e}")
    ok = worst_all <= GRADCHECK_TOL
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_GATE


# -- dump-nodes / diagnose -------------------------------------------------

def cmd_dump_nodes(cfg: _config.RunConfig, args) -> int:
    settings = cfg.likelihood()
    d = args.d
    if d is None:
        if cfg.kind == "factor":
            L = cfg.loadings()
            d = L.shape[0] if L is not None else 2
        elif cfg.has_scenario:
            d = cfg.scenario().d
        else:
            d = load_csv(next(iter(cfg.data_paths().values())), cfg.model.get("header", False)).shape[1]
    boundary = settings.boundary if settings.boundary is not None else (cfg.kind == "repmeas" and d > 1)
    quad = build_quadrature(settings, d, boundary)
    h = cfg.hash()
    head = [f"t{i + 1}" for i in range(d)] + ["weight"]
    if isinstance(quad, SphereLineQuadrature):
        parts = {"ball": (quad.ball_nodes, quad.ball_weights),
                 "sphere": (quad.sphere_nodes, quad.sphere_weights),
                 "line": (quad.line_nodes[:, None], quad.line_weights)}
    else:
        parts = {"box": (quad.nodes, quad.weights)}
    for part, (nodes, weights) in parts.items():
        hd = ["s", "weight"] if part == "line" else head
        rows = [[_fmt(v) for v in row] + [_fmt(w)] for row, w in zip(nodes, weights)]
        write_artifact(cfg.out_dir / _name(f"nodes-{part}", h, "csv"), _csv_text(hd, rows))
        print(f"{part}: {len(weights)} nodes, weight sum {float(np.sum(weights)):.12g}")
    return EXIT_OK


def _read_chain_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    ucols = [i for i, c in enumerate(head) if c.lstrip("b0123456789_").startswith("u") and c[-1].isdigit()]
    chains = {}
    div = {}
    for r in body:
        c = int(r[0])
        chains.setdefault(c, []).append([float(r[i]) for i in ucols])
        div[c] = div.get(c, 0) + int(r[4])
    return [np.array(chains[c]) for c in sorted(chains)], [div[c] for c in sorted(chains)]


def cmd_diagnose(cfg, args) -> int:
    if args.draws:
        paths = [Path(p) for p in args.draws]
    else:
        if cfg is None:
            raise ConfigError("--config", "diagnose needs --config or --draws")
        paths = [cfg.out_dir / _name("chains", cfg.hash(), "csv")]
    arrays, divs = [], []
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"chain file not found: {p}")
        a, dv = _read_chain_csv(p)
        arrays += a
        divs += dv
    diag = diagnostics(arrays)
    diag.divergences = int(sum(divs))
    diag.divergences_per_chain = divs
    text = _json_text(_clean(diag.to_dict()))
    if cfg is not None:
        write_artifact(cfg.out_dir / _name("diagnose", cfg.hash(), "json"), text)
    print(f"chains {diag.n_chains}, draws {diag.n_draws}, max R-hat {_clean(diag.max_rhat)}, "
          f"min bulk ESS {_clean(diag.min_ess)}, divergences {diag.divergences}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------

COMMANDS = {
    "fit": cmd_fit, "simulate": cmd_simulate, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
    "dump-nodes": cmd_dump_nodes, "diagnose": cmd_diagnose,
}


def _parser():
    p = argparse.ArgumentParser(prog="qblatent", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"qblatent {__version__} (config schema {_config.SCHEMA_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=name != "diagnose")
        s.add_argument("--seed", type=int)
        s.add_argument("--chains", type=int)
        s.add_argument("--out")
        s.add_argument("--header", action="store_true", default=None)
        if name == "sweep":
            s.add_argument("--T-values", dest="T_values", type=lambda v: [float(x) for x in v.split(",")])
        if name == "gradcheck":
            s.add_argument("--states", type=int, default=20)
            s.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
        if name == "dump-nodes":
            s.add_argument("--d", type=int)
        if name == "diagnose":
            s.add_argument("--draws", nargs="+")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = {"sampler.seed": args.seed, "sampler.chains": args.chains, "output.dir": args.out,
                 "model.header": args.header}
    try:
        cfg = _config.load(args.config, overrides) if args.config else None
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, IdentificationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SamplerAbort as exc:
        print(f"sampler aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, ValueError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
