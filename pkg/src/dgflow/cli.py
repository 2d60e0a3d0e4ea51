"""Batch front-end: ``dgflow --config experiment.toml``.

The config is a TOML document. ``experiment`` selects one of ``run_dgf``,
``run_penalized``, ``manifold``, ``montecarlo``, ``counterexample`` or
``catalog``; the remaining tables are::

    seed = 0
    [objective]    name = "quartic_wells"   # or polynomial = {dim, terms}
                   params = {tilt = [...]}  # per-agent parameters
                   d = 1
    [graph]        kind = "ring" (path, complete) + agents, or agents + edges = [[1, 2], ...] (1-based)
    [schedule]     c_alpha, tau_alpha, c_beta, tau_beta, t_offset
    [gamma]        c, p, offset   or   kind = "exponential", c, rate
    [penalty]      matrix = [[...]]          # defaults to the catalog constraint
    [integration]  rtol, atol, t0, t_end, order, max_step, max_store, clock
    [init]         x0 = [...]   or   box = [lo, hi] (drawn from the seed)
    [manifold]     t0, x_star, r, points_per_axis, knots, T_verify
    [montecarlo]   replicates, box_lo, box_hi, saddle, minima, problem
    [checks]       consensus_tol, residual_tol
    [output]       dir = "out"

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import kernels
from .catalog import ENTRIES, builtin_catalog, catalog_penalty, catalog_table, known_critical_points
from .flow import (
    IntegrationOptions, NumericalError, dgf_problem, integrate_problem, penalized_problem,
    run_convergence_report,
)
from .graph import GraphError, build_graph, named_graph, penalty_matrix
from .manifold import (
    ChartOptions, ManifoldError, chart, monte_carlo_saddle_avoidance, verify_chart,
)
from .objective import ObjectiveError, Polynomial
from .schedule import Exponential, PowerLaw, ScheduleError, make_schedule

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
OUT_ENV = "DGFLOW_OUT"
EXPERIMENTS = ("run_dgf", "run_penalized", "manifold", "montecarlo", "counterexample", "catalog")
RANDOMIZED = ("montecarlo",)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    objective: dict = field(default_factory=dict)
    graph: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    gamma: dict = field(default_factory=dict)
    penalty: dict = field(default_factory=dict)
    integration: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)
    manifold: dict = field(default_factory=dict)
    montecarlo: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    seed: Optional[int] = None
    out_dir: Optional[str] = None


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a decoded TOML document."""
    exp = data.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
    tables = {k: data.get(k, {}) for k in ("objective", "graph", "schedule", "gamma", "penalty",
                                            "integration", "init", "manifold", "montecarlo", "checks")}
    for k, v in tables.items():
        if not isinstance(v, dict):
            raise ConfigError(f"[{k}] must be a table")
    unknown = set(data) - set(tables) - {"experiment", "seed", "output"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    name = tables["objective"].get("name")
    if name is not None and name not in ENTRIES:
        raise ConfigError(f"unknown catalog objective {name!r}; known: {sorted(ENTRIES)}")
    seed = data.get("seed")
    if seed is not None and (not isinstance(seed, int) or seed < 0):
        raise ConfigError("seed must be a nonnegative integer")
    cfg = ExperimentConfig(exp, seed=seed, out_dir=data.get("output", {}).get("dir"), **tables)
    if cfg.schedule:
        make_schedule(**cfg.schedule)  # raises naming the violated assumption
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return parse_config(data)


# ---------------------------------------------------------------------------
# builders


def _objective(cfg: ExperimentConfig, num_agents: Optional[int] = None):
    spec = cfg.objective
    if "polynomial" in spec:
        poly = spec["polynomial"]
        return Polynomial(int(poly["dim"]), [(t[0], t[1]) for t in poly["terms"]])
    if "name" not in spec:
        raise ConfigError("[objective] needs name or polynomial")
    return builtin_catalog(spec["name"], num_agents, int(spec.get("d", 1)), **spec.get("params", {}))


def _graph(cfg: ExperimentConfig):
    g = cfg.graph
    if "edges" in g:
        return build_graph(int(g["agents"]), [tuple(e) for e in g["edges"]])
    if "kind" not in g or "agents" not in g:
        raise ConfigError("[graph] needs kind and agents, or agents and edges")
    return named_graph(g["kind"], int(g["agents"]))


def _gamma(spec: dict):
    if not spec:
        raise ConfigError("[gamma] is required for penalized experiments")
    if spec.get("kind", "power") == "exponential":
        return Exponential(float(spec["c"]), float(spec["rate"]))
    return PowerLaw(float(spec.get("c", 1.0)), float(spec.get("p", 1.0)), float(spec.get("offset", 0.0)))


def _penalty(cfg: ExperimentConfig):
    if "matrix" in cfg.penalty:
        return penalty_matrix(np.array(cfg.penalty["matrix"], dtype=float))
    name = cfg.objective.get("name")
    if name is None:
        raise ConfigError("[penalty] matrix is required for non-catalog objectives")
    return catalog_penalty(name)


_OPT_KEYS = ("rtol", "atol", "max_step", "min_step", "order", "max_store", "max_steps", "blowup")


def _options(cfg: ExperimentConfig, **override) -> IntegrationOptions:
    kw = {k: cfg.integration[k] for k in _OPT_KEYS if k in cfg.integration}
    kw.update(override)
    return IntegrationOptions(**kw)


def _x0(cfg: ExperimentConfig, dim: int):
    init = cfg.init
    if "x0" in init:
        x0 = np.asarray(init["x0"], dtype=float)
        if x0.size != dim:
            raise ConfigError(f"x0 has {x0.size} entries, problem dimension is {dim}")
        return x0
    if "box" in init:
        if cfg.seed is None:
            raise ConfigError("a seed is required for random initialization")
        lo, hi = init["box"]
        return np.random.default_rng(cfg.seed).uniform(lo, hi, size=dim)
    raise ConfigError("[init] needs x0 or box")


def _span(cfg: ExperimentConfig, t0=0.0, t_end=10.0):
    return float(cfg.integration.get("t0", t0)), float(cfg.integration.get("t_end", t_end))


# ---------------------------------------------------------------------------
# experiments; each returns (summary, artifacts) with artifacts = {name: writer}


def _trajectory_summary(tr, rep) -> dict:
    return {"t_final": tr.t_final, "x_final": tr.final.tolist(), "status": tr.status,
            "steps": tr.nsteps, "rejected": tr.nrejected, "backend": tr.backend,
            "report": rep.as_dict()}


def _trajectory_svg(tr, path, size=480):
    """2D polyline of the first two coordinates."""
    X = tr.states[:, :2]
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    P = 20 + (size - 40) * (X - lo) / span
    pts = " ".join(f"{x:.2f},{size - y:.2f}" for x, y in P)
    Path(path).write_text(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
        f'<polyline fill="none" stroke="black" stroke-width="1" points="{pts}"/></svg>\n')


def run_dgf(cfg: ExperimentConfig):
    g = _graph(cfg)
    obj = _objective(cfg, g.num_agents)
    s = make_schedule(**cfg.schedule)
    t0, t1 = _span(cfg, 0.0, 100.0)
    p = dgf_problem(obj, g, s, _x0(cfg, obj.dim), t0, t1)
    tr = integrate_problem(p, _options(cfg), cfg.integration.get("clock", "direct"))
    rep = run_convergence_report(tr, p, cfg.objective.get("name"),
                                 residual_radius=float(cfg.checks.get("residual_radius", 1e-6)))
    ctol = float(cfg.checks.get("consensus_tol", 1e-2))
    rtol = float(cfg.checks.get("residual_tol", 1e-2))
    summary = _trajectory_summary(tr, rep)
    summary["checks"] = {"consensus": rep.constraint_error < ctol,
                         "subgrad_residual": rep.subgrad_residual < rtol}
    arts = {"trajectory.csv": tr.to_csv}
    if tr.states.shape[1] >= 2:
        arts["trajectory.svg"] = lambda path: _trajectory_svg(tr, path)
    return summary, arts


def run_penalized(cfg: ExperimentConfig):
    h = _objective(cfg)
    Q = _penalty(cfg)
    t0, t1 = _span(cfg)
    p = penalized_problem(h, Q, _gamma(cfg.gamma), _x0(cfg, h.dim), t0, t1)
    tr = integrate_problem(p, _options(cfg))
    rep = run_convergence_report(tr, p, cfg.objective.get("name"))
    summary = _trajectory_summary(tr, rep)
    ctol = float(cfg.checks.get("consensus_tol", 1e-2))
    summary["checks"] = {"constraint": rep.constraint_error < ctol}
    arts = {"trajectory.csv": tr.to_csv}
    if tr.states.shape[1] >= 2:
        arts["trajectory.svg"] = lambda path: _trajectory_svg(tr, path)
    return summary, arts


def counterexample(cfg: ExperimentConfig):
    """The non-coercive quadratic; defaults to ``gamma_t = t`` from ``(1, 1)`` on ``[0, 5]``."""
    h = builtin_catalog("coercivity_counterexample")
    Q = catalog_penalty("coercivity_counterexample")
    t0, t1 = _span(cfg, 0.0, 5.0)
    gamma = _gamma(cfg.gamma or {"c": 1.0, "p": 1.0, "offset": 0.0})
    x0 = np.asarray(cfg.init.get("x0", [1.0, 1.0]), dtype=float)
    p = penalized_problem(h, Q, gamma, x0, t0, t1)
    tr = integrate_problem(p, _options(cfg, rtol=cfg.integration.get("rtol", 1e-8),
                                       atol=cfg.integration.get("atol", 1e-12)))
    x1 = float(tr.final[0])
    reached = abs(x1) < float(cfg.checks.get("consensus_tol", 1e-2))
    summary = {"t_final": tr.t_final, "x_final": tr.final.tolist(), "x1_final": x1,
               "x2_final": float(tr.final[1]), "constraint_reached": reached,
               "checks": {"x1_at_least_half": x1 >= 0.5}}
    if not reached:
        summary["flag"] = "non-coercive: constraint not reached"
    return summary, {"trajectory.csv": tr.to_csv,
                     "trajectory.svg": lambda path: _trajectory_svg(tr, path)}


def manifold(cfg: ExperimentConfig, threads: int = 1):
    h = _objective(cfg)
    Q = _penalty(cfg)
    m = cfg.manifold
    gamma = _gamma(cfg.gamma or {"c": 1000.0, "p": 1.0, "offset": 1.0})
    x_star = np.asarray(m.get("x_star", np.zeros(h.dim)), dtype=float)
    t0 = float(m.get("t0", 1.0))
    copts = ChartOptions(r=float(m.get("r", 0.3)), points_per_axis=int(m.get("points_per_axis", 9)),
                         knots=int(m.get("knots", 2000)), threads=threads)
    ch = chart(h, Q, gamma, x_star, t0, copts)
    rep = verify_chart(ch, T_verify=m.get("T_verify"), threads=threads)
    d = rep.as_dict()
    summary = {"chart": ch.metadata(), "verification": d,
               "checks": {k[:-5]: bool(v) for k, v in d.items() if k.endswith("_pass")}}
    return summary, {"chart.csv": lambda path: ch.to_csv(path, Path(path).with_name("chart_meta.json")),
                     "chart.svg": ch.to_svg}


def montecarlo(cfg: ExperimentConfig, threads: int = 1):
    mc = cfg.montecarlo
    if cfg.seed is None:
        raise ConfigError("montecarlo needs a seed")
    kind = mc.get("problem", "penalized")
    t0, t1 = _span(cfg, 0.0, 100.0)
    if kind == "dgf":
        g = _graph(cfg)
        obj = _objective(cfg, g.num_agents)
        s = make_schedule(**cfg.schedule)
        make = lambda x0: dgf_problem(obj, g, s, x0, t0, t1)  # noqa: E731
        d = obj.d
        project = lambda x: x.reshape(-1, d).mean(axis=0)  # noqa: E731
    elif kind == "penalized":
        h = _objective(cfg)
        Q = _penalty(cfg)
        gamma = _gamma(cfg.gamma)
        make = lambda x0: penalized_problem(h, Q, gamma, x0, t0, t1)  # noqa: E731
        project = None
    else:
        raise ConfigError(f"montecarlo problem must be 'dgf' or 'penalized', got {kind!r}")
    if "minima" in mc:
        minima = [np.atleast_1d(np.asarray(m, dtype=float)) for m in mc["minima"]]
    else:
        name = cfg.objective.get("name")
        minima = [np.asarray(c.location) for c in known_critical_points(name)
                  if c.kind == "local_min_candidate"] if name else []
    stats = monte_carlo_saddle_avoidance(
        make, mc["box_lo"], mc["box_hi"], mc["saddle"], minima,
        replicates=int(mc.get("replicates", 200)), seed=cfg.seed, project=project,
        opts=_options(cfg, diagnostics=False, max_store=int(cfg.integration.get("max_store", 200))),
        threads=threads, saddle_tol=float(mc.get("saddle_tol", 1e-2)),
        min_tol=float(mc.get("min_tol", 1e-2)))
    summary = {"montecarlo": stats.as_dict(),
               "checks": {"no_saddle_convergence": stats.near_saddle == 0,
                          "resolved_to_minimum": stats.resolved_fraction >= 0.95}}

    def write(path):
        E = stats.endpoints
        header = ",".join(f"y_{i + 1}" for i in range(E.shape[1]))
        np.savetxt(path, E, delimiter=",", header=header, comments="", fmt="%.17g")

    return summary, {"endpoints.csv": write}


def catalog_list(cfg: Optional[ExperimentConfig] = None):
    table = catalog_table()
    return {"catalog": table}, {"catalog.txt": lambda path: Path(path).write_text(table + "\n")}


# ---------------------------------------------------------------------------
# entry point


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if math.isfinite(v) else str(v)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def run(cfg: ExperimentConfig, out_dir, threads: int = 1, quiet: bool = False) -> int:
    """Run one experiment and write its artifacts; returns the exit code."""
    runners = {"run_dgf": run_dgf, "run_penalized": run_penalized, "counterexample": counterexample,
               "catalog": catalog_list,
               "manifold": lambda c: manifold(c, threads), "montecarlo": lambda c: montecarlo(c, threads)}
    summary, arts = runners[cfg.experiment](cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # artifacts are written here, serially, after all workers finished
    for name, write in arts.items():
        write(out / name)
    doc = {"experiment": cfg.experiment, "seed": cfg.seed, "backend": kernels.BACKEND,
           "parameters": {k: v for k, v in cfg.__dict__.items()
                          if k not in ("experiment", "seed") and v},
           **summary}
    checks = doc.get("checks", {})
    doc["passed"] = all(checks.values()) if checks else True
    (out / "summary.json").write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    if not quiet:
        if cfg.experiment == "catalog":
            print(summary["catalog"])
        for k, v in checks.items():
            print(f"{'PASS' if v else 'FAIL'}  {k}")
        if "flag" in summary:
            print(summary["flag"])
        print(f"wrote {out / 'summary.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dgflow", description="Run a distributed gradient flow experiment.")
    ap.add_argument("--config", help="TOML experiment file")
    ap.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, else the config's [output] dir, else ./dgflow_out)")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for replicates and chart points")
    ap.add_argument("--quiet", action="store_true", help="suppress progress output")
    ap.add_argument("--list-catalog", action="store_true", help="print the builtin objectives and exit")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.list_catalog:
        print(catalog_table())
        return EXIT_OK
    if not args.config:
        print("error: --config is required (or --list-catalog)", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise ConfigError("seed must fit in an unsigned 64-bit integer")
            cfg.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        if cfg.experiment in RANDOMIZED and cfg.seed is None:
            raise ConfigError(f"{cfg.experiment} needs a seed")
        out = args.out or os.environ.get(OUT_ENV) or cfg.out_dir or "dgflow_out"
        return run(cfg, out, args.threads, args.quiet)
    except (ConfigError, ScheduleError, GraphError, ObjectiveError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, ManifoldError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
